"""Sliding-window region attribution and its projection to pixel space."""
from __future__ import annotations

import csv
import io
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .confidence import DEFAULT_METHOD, ConfidenceMethod, confidence_batch
from .errors import ConfigError, DimensionError, FormatError
from .grid import PatchGridSpec, extract_all_patches
from .region import RegionClassifierModel


@dataclass
class RegionAttributionMap:
    """g x g confidences; entry ``[row, col]`` is the patch with top-left ``(s*col, s*row)``."""

    values: np.ndarray
    method: str = DEFAULT_METHOD.value
    attribute_name: str = ""


@dataclass
class PixelAttributionMap:
    values: np.ndarray
    coverage: np.ndarray
    normalized: bool = False

    @property
    def covered(self) -> np.ndarray:
        return self.coverage > 0


def region_map(model: RegionClassifierModel, image: np.ndarray, method=DEFAULT_METHOD,
               batch_size: int = 256) -> RegionAttributionMap:
    """Confidence of the region classifier for every grid patch of one image."""
    method = ConfidenceMethod.parse(method)
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    grid = model.grid
    if image.ndim != 3 or image.shape[0] != model.in_channels:
        raise DimensionError(f"image of shape {image.shape} does not match model with "
                             f"{model.in_channels} channels")
    patches = extract_all_patches(np.asarray(image, dtype=np.float32), grid)
    p = grid.n_positions
    conf = np.empty(p, dtype=np.float32)
    for start in range(0, p, batch_size):
        idx = np.arange(start, min(start + batch_size, p))
        logits = model.forward(patches[idx], idx, train=False)
        conf[idx] = confidence_batch(logits, method)
    return RegionAttributionMap(conf.reshape(grid.grid_side, grid.grid_side), method.value, model.attribute_name)


def region_maps(model: RegionClassifierModel, images, method=DEFAULT_METHOD, batch_size: int = 256,
                threads: int = 1) -> list[RegionAttributionMap]:
    """:func:`region_map` for many images; results come back in input order.

    Only inference runs on worker threads, and the model's forward pass keeps
    no state that concurrent eval calls could corrupt except the backward
    cache, which eval never reads.
    """
    if threads <= 1 or len(images) < 2:
        return [region_map(model, im, method, batch_size) for im in images]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda im: region_map(model, im, method, batch_size), images))


def mean_map(model: RegionClassifierModel, images, method=DEFAULT_METHOD, batch_size: int = 256,
             threads: int = 1) -> RegionAttributionMap:
    if len(images) == 0:
        raise ConfigError("mean map of an empty dataset")
    maps = region_maps(model, images, method, batch_size, threads)
    return average_maps(maps)


def average_maps(maps: list[RegionAttributionMap]) -> RegionAttributionMap:
    if not maps:
        raise ConfigError("cannot average zero maps")
    stack = np.stack([m.values for m in maps]).astype(np.float64)
    return replace(maps[0], values=stack.mean(axis=0).astype(np.float32))


def pixel_map(rmap: RegionAttributionMap | np.ndarray, grid: PatchGridSpec) -> PixelAttributionMap:
    """Average, per pixel, the confidences of every patch that contains it.

    Pixels no patch covers get value 0 and coverage 0. A NaN region entry
    marks a patch that was not evaluated; it covers nothing.
    """
    values = rmap.values if isinstance(rmap, RegionAttributionMap) else np.asarray(rmap)
    if values.shape != (grid.grid_side, grid.grid_side):
        raise DimensionError(f"region map {values.shape} does not match grid side {grid.grid_side}")
    size, k = grid.image_size, grid.patch_size
    acc = np.zeros((size, size), dtype=np.float64)
    counts = np.zeros((size, size), dtype=np.uint32)
    flat = values.reshape(-1).astype(np.float64)
    for i, (x, y) in enumerate(grid.positions()):
        if np.isnan(flat[i]):
            continue
        acc[y:y + k, x:x + k] += flat[i]
        counts[y:y + k, x:x + k] += 1
    out = np.divide(acc, counts, out=np.zeros_like(acc), where=counts > 0)
    return PixelAttributionMap(out.astype(np.float32), counts)


def normalize01(pmap: PixelAttributionMap) -> PixelAttributionMap:
    """Min-max rescale covered pixels to [0, 1]; a constant map becomes 0.5."""
    covered = pmap.covered
    if not covered.any():
        raise ConfigError("cannot normalize a map with no covered pixels")
    v = pmap.values.astype(np.float64)
    lo, hi = v[covered].min(), v[covered].max()
    out = np.zeros_like(v)
    if hi > lo:
        out[covered] = (v[covered] - lo) / (hi - lo)
    else:
        out[covered] = 0.5
    return PixelAttributionMap(out.astype(np.float32), pmap.coverage.copy(), True)


# -- RAMP files -------------------------------------------------------------

RAMP_MAGIC = b"RAMP"
RAMP_VERSION = 1
KIND_REGION, KIND_PIXEL = 0, 1


def encode_ramp(m: RegionAttributionMap | PixelAttributionMap) -> bytes:
    buf = io.BytesIO()
    kind = KIND_PIXEL if isinstance(m, PixelAttributionMap) else KIND_REGION
    values = np.asarray(m.values, dtype="<f4")
    rows, cols = values.shape
    buf.write(RAMP_MAGIC + struct.pack("<IBII", RAMP_VERSION, kind, rows, cols))
    buf.write(np.ascontiguousarray(values).tobytes())
    if kind == KIND_PIXEL:
        buf.write(np.ascontiguousarray(m.coverage, dtype="<u4").tobytes())
    return buf.getvalue()


def decode_ramp(data: bytes):
    head = struct.calcsize("<4sIBII")
    if len(data) < head:
        raise FormatError("truncated RAMP file")
    magic, version, kind, rows, cols = struct.unpack_from("<4sIBII", data)
    if magic != RAMP_MAGIC:
        raise FormatError("not a RAMP file (bad magic)")
    if version != RAMP_VERSION:
        raise FormatError(f"unsupported RAMP version {version}")
    if kind not in (KIND_REGION, KIND_PIXEL):
        raise FormatError(f"unknown RAMP kind {kind}")
    n = rows * cols
    expected = head + 4 * n * (2 if kind == KIND_PIXEL else 1)
    if len(data) != expected:
        raise FormatError(f"RAMP payload is {len(data)} bytes, expected {expected}")
    values = np.frombuffer(data, dtype="<f4", count=n, offset=head).reshape(rows, cols).astype(np.float32)
    if kind == KIND_REGION:
        return RegionAttributionMap(values)
    coverage = np.frombuffer(data, dtype="<u4", count=n, offset=head + 4 * n).reshape(rows, cols).astype(np.uint32)
    return PixelAttributionMap(values, coverage)


def save_ramp(path, m) -> None:
    Path(path).write_bytes(encode_ramp(m))


def load_ramp(path):
    return decode_ramp(Path(path).read_bytes())


def write_map_csv(path, m) -> None:
    """Long-format CSV: ``row,col,value`` plus ``coverage`` for pixel maps."""
    pixel = isinstance(m, PixelAttributionMap)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"] + (["coverage"] if pixel else []))
        for (r, c), v in np.ndenumerate(m.values):
            w.writerow([r, c, repr(float(v))] + ([int(m.coverage[r, c])] if pixel else []))


def write_heat_png(path, m) -> None:
    """8-bit grayscale PNG of the map, min-max normalized over covered cells."""
    if isinstance(m, PixelAttributionMap):
        norm = m if m.normalized else normalize01(m)
        v = norm.values
    else:
        v = m.values.astype(np.float64)
        lo, hi = v.min(), v.max()
        v = (v - lo) / (hi - lo) if hi > lo else np.full_like(v, 0.5)
    Image.fromarray(np.clip(np.rint(v * 255), 0, 255).astype(np.uint8), mode="L").save(path, format="PNG")
