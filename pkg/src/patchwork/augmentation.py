"""Quantile-thresholded grey-out and Gaussian-noise perturbation of attributed pixels."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attribution import PixelAttributionMap, load_ramp
from .errors import ConfigError, DimensionError


class Scheme(str, enum.Enum):
    GENERAL_MASK = "general-mask"
    SPECIFIC_MASK = "specific-mask"
    GENERAL_NOISE = "general-noise"
    SPECIFIC_NOISE = "specific-noise"

    @classmethod
    def parse(cls, value) -> "Scheme":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-").replace(" ", "-")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown scheme {value!r}; choose from {[s.value for s in cls]}") from None

    @property
    def is_general(self) -> bool:
        return self in (Scheme.GENERAL_MASK, Scheme.GENERAL_NOISE)

    @property
    def is_noise(self) -> bool:
        return self in (Scheme.GENERAL_NOISE, Scheme.SPECIFIC_NOISE)

    @property
    def label(self) -> str:
        return self.value.replace("-", " ").title()


ALL_SCHEMES = tuple(Scheme)


@dataclass
class AugmentationPolicy:
    scheme: Scheme
    quantile: float
    sigma: float = 0.5
    mask_value: float = 0.5
    resample: bool = True
    general_map: PixelAttributionMap | None = None
    general_map_path: str | None = None

    def __post_init__(self):
        self.scheme = Scheme.parse(self.scheme)
        if not 0.0 < self.quantile < 1.0:
            raise ConfigError(f"quantile must lie in (0, 1), got {self.quantile}")
        if self.sigma <= 0:
            raise ConfigError("sigma must be > 0")
        if not 0.0 <= self.mask_value <= 1.0:
            raise ConfigError("mask_value must lie in [0, 1]")
        self._general_mask = None

    @property
    def general_mask(self) -> np.ndarray:
        """Mask from the dataset-mean map, computed once and reused for every image."""
        if self.general_map is None:
            raise ConfigError(f"scheme {self.scheme.value} requires a general (mean) attribution map")
        if self._general_mask is None:
            self._general_mask = threshold_mask(self.general_map, self.quantile)
        return self._general_mask

    def to_json(self) -> dict:
        return {"scheme": self.scheme.value, "quantile": self.quantile, "sigma": self.sigma,
                "mask_value": self.mask_value, "resample": self.resample,
                "general_map": self.general_map_path}

    @classmethod
    def from_json(cls, d: dict, base_dir=None) -> "AugmentationPolicy":
        allowed = {"scheme", "quantile", "sigma", "mask_value", "resample", "general_map"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown policy fields: {sorted(unknown)}")
        if "scheme" not in d or "quantile" not in d:
            raise ConfigError("policy needs 'scheme' and 'quantile'")
        gpath = d.get("general_map")
        gmap = None
        if gpath:
            p = Path(gpath)
            if not p.is_absolute() and base_dir is not None:
                p = Path(base_dir) / p
            if not p.exists():
                raise ConfigError(f"general map {p} does not exist")
            gmap = load_ramp(p)
            if not isinstance(gmap, PixelAttributionMap):
                raise ConfigError(f"general map {p} is a region map; a pixel map is required")
        return cls(d["scheme"], float(d["quantile"]), float(d.get("sigma", 0.5)),
                   float(d.get("mask_value", 0.5)), bool(d.get("resample", True)), gmap, gpath)

    @classmethod
    def load(cls, path) -> "AugmentationPolicy":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"policy {path} is not valid JSON: {exc}") from None
        return cls.from_json(d, Path(path).parent)


def nearest_rank_threshold(values: np.ndarray, q: float) -> float:
    """Value at 1-based rank ceil(q * n) of the ascending sort."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    n = v.size
    # the tolerance keeps q * n == integer from rounding up (0.7 * 10 etc.)
    rank = min(max(math.ceil(q * n - 1e-9), 1), n)
    return float(v[rank - 1])


def threshold_mask(pmap: PixelAttributionMap, q: float) -> np.ndarray:
    """Boolean H x W mask of covered pixels strictly above the nearest-rank q-quantile."""
    if not 0.0 < q < 1.0:
        raise ConfigError(f"quantile must lie in (0, 1), got {q}")
    covered = pmap.covered
    if not covered.any():
        raise ConfigError("attribution map has no covered pixels")
    thr = nearest_rank_threshold(pmap.values[covered], q)
    return covered & (pmap.values.astype(np.float64) > thr)


def _check_mask(image: np.ndarray, mask: np.ndarray) -> None:
    if mask.shape != image.shape[1:]:
        raise DimensionError(f"mask {mask.shape} does not match image {image.shape}")


def apply_mask(image: np.ndarray, mask: np.ndarray, mask_value: float = 0.5) -> np.ndarray:
    _check_mask(image, mask)
    out = image.copy()
    out[:, mask] = mask_value
    return out


def apply_noise(image: np.ndarray, mask: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add N(0, sigma^2) to masked pixels of every channel, then clip to [0, 1]."""
    if sigma <= 0:
        raise ConfigError("sigma must be > 0")
    _check_mask(image, mask)
    out = image.copy()
    n = int(mask.sum())
    if n == 0:
        return out
    noise = rng.normal(0.0, sigma, size=(image.shape[0], n))
    out[:, mask] = np.clip(image[:, mask] + noise, 0.0, 1.0).astype(image.dtype)
    return out


def augment_rng(seed: int, image_index: int, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, image, epoch) so images can be processed in any order."""
    return np.random.default_rng(np.random.SeedSequence([seed, image_index, epoch]))


def augment(image: np.ndarray, policy: AugmentationPolicy, specific_map: PixelAttributionMap | None = None,
            epoch: int = 0, rng: np.random.Generator | None = None, *, seed: int = 0,
            image_index: int = 0) -> np.ndarray:
    """Perturb the pixels the chosen attribution map ranks above the policy quantile.

    With no explicit ``rng``, noise comes from :func:`augment_rng`; when
    ``policy.resample`` is false the epoch is ignored so every epoch sees the
    same noise.
    """
    if policy.scheme.is_general:
        mask = policy.general_mask
    else:
        if specific_map is None:
            raise ConfigError(f"scheme {policy.scheme.value} requires a per-image attribution map")
        mask = threshold_mask(specific_map, policy.quantile)
    if not policy.scheme.is_noise:
        return apply_mask(image, mask, policy.mask_value)
    if rng is None:
        rng = augment_rng(seed, image_index, epoch if policy.resample else 0)
    return apply_noise(image, mask, policy.sigma, rng)


def policy_mask(policy: AugmentationPolicy, specific_map: PixelAttributionMap | None = None) -> np.ndarray:
    if policy.scheme.is_general:
        return policy.general_mask
    if specific_map is None:
        raise ConfigError(f"scheme {policy.scheme.value} requires a per-image attribution map")
    return threshold_mask(specific_map, policy.quantile)
