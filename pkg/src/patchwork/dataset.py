"""Image manifests, PNG I/O, the synthetic confounder generator and subset builders."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError

SPLIT_COLUMN = "split"


@dataclass(frozen=True)
class Record:
    path: str
    attrs: dict
    split: str = ""


@dataclass
class DatasetManifest:
    records: list[Record]
    attributes: list[str]
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, attr: str) -> np.ndarray:
        if attr not in self.attributes:
            raise KeyError(f"unknown attribute {attr!r}; manifest has {self.attributes}")
        return np.array([r.attrs[attr] for r in self.records], dtype=np.int64)

    def paths(self) -> list[str]:
        return [r.path for r in self.records]

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.records[i] for i in indices], list(self.attributes), self.root)

    def cell_counts(self, target: str, confounder: str) -> dict:
        t, c = self.column(target), self.column(confounder)
        return {(a, b): int(np.sum((t == a) & (c == b))) for a in (0, 1) for b in (0, 1)}


def _parse_binary(cell: str, line: int, column: str) -> int:
    cell = cell.strip()
    if cell not in ("0", "1"):
        raise FormatError(f"line {line}: attribute {column!r} must be 0 or 1, got {cell!r}")
    return int(cell)


def load_manifest(csv_path) -> DatasetManifest:
    """Read ``path,attr1,attr2,...`` (optional ``split`` column); paths resolve
    relative to the manifest's directory."""
    csv_path = Path(csv_path)
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FormatError(f"{csv_path}: empty manifest") from None
        if not header or header[0] != "path":
            raise FormatError(f"{csv_path}: first header column must be 'path'")
        if len(set(header)) != len(header):
            raise FormatError(f"{csv_path}: duplicate header columns")
        attrs = [h for h in header[1:] if h != SPLIT_COLUMN]
        records, seen = [], set()
        for line, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"line {line}: expected {len(header)} cells, got {len(row)}")
            values = dict(zip(header, row))
            path = values["path"].strip()
            if not path:
                raise FormatError(f"line {line}: empty path")
            if path in seen:
                raise FormatError(f"line {line}: duplicate path {path!r}")
            seen.add(path)
            records.append(Record(path, {a: _parse_binary(values[a], line, a) for a in attrs},
                                  values.get(SPLIT_COLUMN, "").strip()))
    return DatasetManifest(records, attrs, csv_path.parent)


def write_manifest(manifest: DatasetManifest, csv_path) -> None:
    with_split = any(r.split for r in manifest.records)
    header = ["path", *manifest.attributes] + ([SPLIT_COLUMN] if with_split else [])
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in manifest.records:
            w.writerow([r.path, *(r.attrs[a] for a in manifest.attributes)] + ([r.split] if with_split else []))


def load_image(path, size: int | None = None) -> np.ndarray:
    """Decode an 8-bit grayscale or RGB PNG to a C x H x W float32 array in [0, 1],
    bilinearly resized to ``size`` x ``size`` when given."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                pass
            elif im.mode in ("1", "LA"):
                im = im.convert("L")
            elif im.mode in ("P", "RGBA"):
                im = im.convert("RGB")
            else:
                raise OSError(f"unsupported PNG mode {im.mode}")
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    arr = arr[None] if arr.ndim == 2 else arr.transpose(2, 0, 1)
    if size is not None and arr.shape[1:] != (size, size):
        arr = resize_bilinear(arr, size)
    return np.ascontiguousarray(arr)


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Per-channel bilinear resize (pixel-centre aligned, edge-clamped)."""
    out = [np.asarray(Image.fromarray(ch.astype(np.float32), mode="F").resize((size, size), Image.BILINEAR))
           for ch in image]
    return np.stack(out).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Write a 1- or 3-channel image in [0, 1] as an 8-bit PNG."""
    q = to_uint8(image)
    if q.shape[0] == 1:
        Image.fromarray(q[0], mode="L").save(path, format="PNG")
    elif q.shape[0] == 3:
        Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(path, format="PNG")
    else:
        raise ConfigError(f"cannot save image with {q.shape[0]} channels as PNG")


def load_images(manifest: DatasetManifest, size: int) -> np.ndarray:
    return np.stack([load_image(manifest.resolve(r), size) for r in manifest.records])


# -- synthetic data ---------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Grey images with a global stripe pattern (target) and an optional bright
    square inside a fixed rectangle (confounder).

    The target label sets stripe orientation (1 = horizontal, 0 = vertical).
    Stripe contrast is ``target_contrast * (1 - contrast_jitter * u)`` with
    u ~ U(0, 1) per image.
    ``confounder_region`` defaults to a square of side 3/8 I offset by I/16.
    """

    image_size: int = 64
    channels: int = 1
    background: float = 0.5
    stripe_period: float = 8.0
    target_contrast: float = 0.15
    contrast_jitter: float = 0.0
    square_size: int | None = None
    confounder_contrast: float = 0.3
    confounder_region: tuple | None = None
    noise_std: float = 0.05
    target_name: str = "target"
    confounder_name: str = "confounder"

    def __post_init__(self):
        if self.image_size < 8 or self.channels not in (1, 3):
            raise ConfigError("synthetic images need image_size >= 8 and 1 or 3 channels")
        x0, y0, w, h = self.region
        if x0 < 0 or y0 < 0 or x0 + w > self.image_size or y0 + h > self.image_size or w < 1 or h < 1:
            raise ConfigError(f"confounder region {self.region} outside the image")
        if w * h > 0.25 * self.image_size ** 2:
            raise ConfigError("confounder region must cover at most 25% of the image")
        if self.square > min(w, h):
            raise ConfigError("confounder square does not fit in its region")
        if not 0.0 <= self.contrast_jitter <= 1.0:
            raise ConfigError("contrast_jitter must lie in [0, 1]")
        if self.noise_std < 0 or self.stripe_period <= 0:
            raise ConfigError("noise_std must be >= 0 and stripe_period > 0")

    @property
    def region(self) -> tuple[int, int, int, int]:
        if self.confounder_region is not None:
            return tuple(int(v) for v in self.confounder_region)
        i = self.image_size
        return (i // 16, i // 16, 3 * i // 8, 3 * i // 8)

    @property
    def square(self) -> int:
        return self.square_size if self.square_size is not None else max(2, 5 * self.image_size // 32)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["confounder_region"] = list(self.region)
        d["square_size"] = self.square
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("confounder_region") is not None:
            d["confounder_region"] = tuple(d["confounder_region"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def render_synthetic(spec: SyntheticSpec, target: int, confounder: int, rng: np.random.Generator) -> np.ndarray:
    i = spec.image_size
    yy, xx = np.mgrid[0:i, 0:i].astype(np.float64)
    coord = yy if target == 1 else xx
    phase = rng.uniform(0, 2 * np.pi)
    contrast = spec.target_contrast * (1.0 - spec.contrast_jitter * rng.uniform())
    img = spec.background + contrast * np.sin(2 * np.pi * coord / spec.stripe_period + phase)
    if confounder:
        x0, y0, w, h = spec.region
        sq = spec.square
        sx = x0 + int(rng.integers(0, w - sq + 1))
        sy = y0 + int(rng.integers(0, h - sq + 1))
        img[sy:sy + sq, sx:sx + sq] += spec.confounder_contrast
    img = np.broadcast_to(img, (spec.channels, i, i))
    img = img + rng.normal(0.0, spec.noise_std, size=img.shape) if spec.noise_std > 0 else img
    return to_uint8(img).astype(np.float32) / 255.0


@dataclass
class SyntheticDataset:
    images: np.ndarray
    manifest: DatasetManifest
    region: tuple
    spec: SyntheticSpec
    seed: int


def generate_synthetic(spec: SyntheticSpec, n_per_cell: int, seed: int) -> SyntheticDataset:
    """Render ``n_per_cell`` images for each (target, confounder) cell.

    Images are quantized to 8 bits so the in-memory arrays equal what a PNG
    round trip returns.
    """
    if n_per_cell < 1:
        raise ConfigError("n_per_cell must be >= 1")
    rng = np.random.default_rng(seed)
    images, records = [], []
    for t in (0, 1):
        for c in (0, 1):
            for _ in range(n_per_cell):
                idx = len(records)
                images.append(render_synthetic(spec, t, c, rng))
                records.append(Record(f"images/{idx:06d}.png", {spec.target_name: t, spec.confounder_name: c}))
    manifest = DatasetManifest(records, [spec.target_name, spec.confounder_name])
    return SyntheticDataset(np.stack(images), manifest, spec.region, spec, seed)


def write_synthetic(ds: SyntheticDataset, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for rec, img in zip(ds.manifest.records, ds.images):
        save_image(out / rec.path, img)
    ds.manifest.root = out
    write_manifest(ds.manifest, out / "manifest.csv")
    truth = {"region": list(ds.region), "spec": ds.spec.to_dict(), "seed": ds.seed,
             "n_per_cell": len(ds.manifest) // 4}
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n")


# -- subsets ------------------------------------------------------------------

@dataclass(frozen=True)
class BiasSpec:
    """Requested counts per cell, ordered ``(A & conf, A & not conf, B & conf, B & not conf)``
    with A the target value 1 and B the target value 0."""

    a_conf: int
    a_noconf: int
    b_conf: int
    b_noconf: int

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ConfigError("bias cell counts must be non-negative")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.a_conf, self.a_noconf, self.b_conf, self.b_noconf)

    def cells(self) -> dict:
        """Mapping ``(target, confounder) -> count``."""
        return {(1, 1): self.a_conf, (1, 0): self.a_noconf, (0, 1): self.b_conf, (0, 0): self.b_noconf}

    @classmethod
    def from_proportions(cls, props, scale: int = 1) -> "BiasSpec":
        props = tuple(int(v) for v in props)
        if len(props) != 4:
            raise ConfigError("bias needs exactly four cell proportions")
        return cls(*(p * scale for p in props))

    @property
    def total(self) -> int:
        return sum(self.as_tuple())


PAPER_BIAS = (0, 3, 2, 1)


def _cell_indices(manifest, target, confounder, exclude):
    t, c = manifest.column(target), manifest.column(confounder)
    excluded = set(exclude)
    keep = np.array([r.path not in excluded for r in manifest.records], dtype=bool)
    return {(a, b): np.flatnonzero((t == a) & (c == b) & keep) for a in (0, 1) for b in (0, 1)}


def _sample_cells(manifest, target, confounder, wanted: dict, seed, exclude):
    pools = _cell_indices(manifest, target, confounder, exclude)
    rng = np.random.default_rng(seed)
    chosen = []
    for cell in sorted(wanted):
        n = wanted[cell]
        pool = pools[cell]
        if n > len(pool):
            raise ConfigError(f"cell {target}={cell[0]}, {confounder}={cell[1]} needs {n} records "
                              f"but only {len(pool)} are available")
        chosen.append(rng.choice(pool, size=n, replace=False))
    return manifest.subset(np.sort(np.concatenate(chosen)).tolist())


def build_biased_subset(manifest: DatasetManifest, target_attr: str, confounder_attr: str,
                        bias: BiasSpec, seed: int, exclude=()) -> DatasetManifest:
    return _sample_cells(manifest, target_attr, confounder_attr, bias.cells(), seed, exclude)


def build_balanced_subset(manifest: DatasetManifest, target_attr: str, confounder_attr: str,
                          total: int, seed: int, exclude=()) -> DatasetManifest:
    """Subset of ``total`` records with equal counts in the four cells (total divisible by 4)."""
    if total % 4:
        raise ConfigError(f"balanced subset size {total} is not divisible by 4")
    wanted = {(a, b): total // 4 for a in (0, 1) for b in (0, 1)}
    return _sample_cells(manifest, target_attr, confounder_attr, wanted, seed, exclude)


def build_balanced_testset(manifest: DatasetManifest, target_attr: str, confounder_attr: str,
                           n_per_cell: int, seed: int, exclude=()) -> DatasetManifest:
    """Equal counts per cell, drawn only from records whose paths are not in ``exclude``."""
    test = build_balanced_subset(manifest, target_attr, confounder_attr, 4 * n_per_cell, seed, exclude)
    check_disjoint(test, exclude)
    return test


def check_disjoint(manifest: DatasetManifest, other) -> None:
    other_paths = set(other.paths() if isinstance(other, DatasetManifest) else other)
    overlap = other_paths.intersection(manifest.paths())
    if overlap:
        raise ConfigError(f"{len(overlap)} records overlap between train and test subsets")
