"""``PWCK`` checkpoint files.

Layout (all integers u32 little-endian, all values f32 little-endian)::

    b"PWCK" | version=1 | n_records
    n_records x ( name_len | name (UTF-8) | rank | dims[rank] | values )
    grid: image_size | patch_size | grid_side | stride      (all 0 = no grid)
    meta_len | meta (UTF-8 JSON, sorted keys)

Values are stored as float32, so a float32 model round-trips bit-exactly.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"PWCK"
VERSION = 1


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def encode_checkpoint(tensors: dict[str, np.ndarray], grid=None, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + _u32(VERSION) + _u32(len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(_u32(len(raw)) + raw + _u32(arr.ndim))
        for d in arr.shape:
            buf.write(_u32(d))
        buf.write(np.ascontiguousarray(arr).tobytes())
    if grid is None:
        g = (0, 0, 0, 0)
    elif hasattr(grid, "as_tuple"):
        g = grid.as_tuple()
    else:
        g = tuple(int(v) for v in grid)
    buf.write(struct.pack("<4I", *g))
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf.write(_u32(len(blob)) + blob)
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_checkpoint(data: bytes):
    """Inverse of :func:`encode_checkpoint`: returns ``(tensors, grid_tuple_or_None, meta)``."""
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError("not a PWCK checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported PWCK version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        if name in tensors:
            raise FormatError(f"duplicate record {name!r}")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    grid = struct.unpack("<4I", r.take(16))
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(data):
        raise FormatError("trailing bytes after checkpoint")
    return tensors, (None if grid == (0, 0, 0, 0) else grid), meta


def save_checkpoint(path, tensors, grid=None, meta=None) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors, grid, meta))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
