"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class PatchworkError(Exception):
    """Base class for all library errors."""


class ConfigError(PatchworkError, ValueError):
    """Invalid configuration or arguments (CLI exit code 2)."""


class DimensionError(PatchworkError, ValueError):
    """Tensor or image shapes do not agree (CLI exit code 2)."""


class FormatError(PatchworkError, ValueError):
    """Malformed file contents: bad magic, truncated record, bad CSV row."""


class NumericError(PatchworkError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class StateError(PatchworkError, RuntimeError):
    """Operation called in the wrong order, e.g. backward before forward."""
