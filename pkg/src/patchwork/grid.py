"""Square lattice of patch positions over a square image."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class PatchGridSpec:
    image_size: int
    patch_size: int
    grid_side: int
    stride: int

    @property
    def n_positions(self) -> int:
        return self.grid_side ** 2

    @property
    def covers_image(self) -> bool:
        """True iff every pixel lies inside at least one patch."""
        return (self.stride * (self.grid_side - 1) + self.patch_size == self.image_size
                and self.stride <= self.patch_size)

    def positions(self) -> np.ndarray:
        """(p, 2) array of top-left ``(x, y)`` for every patch index."""
        i = np.arange(self.n_positions)
        return np.stack([(i % self.grid_side) * self.stride, (i // self.grid_side) * self.stride], axis=1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.image_size, self.patch_size, self.grid_side, self.stride)


def make_grid(image_size: int, patch_size: int, grid_side: int) -> PatchGridSpec:
    """Build a grid of ``grid_side**2`` patches with stride ``(I - k) / (g - 1)``.

    ``image_size == patch_size`` is the degenerate single-patch grid and
    forces ``grid_side`` to 1.
    """
    if patch_size < 1 or patch_size > image_size:
        raise ConfigError(f"patch size {patch_size} must be in [1, image size {image_size}]")
    if patch_size == image_size:
        return PatchGridSpec(image_size, patch_size, 1, 1)
    if grid_side < 2:
        raise ConfigError(f"grid side must be >= 2 when patch < image, got {grid_side}")
    span = image_size - patch_size
    if span % (grid_side - 1):
        raise ConfigError(
            f"(image_size - patch_size) = {span} is not divisible by (grid_side - 1) = {grid_side - 1}; "
            "the stride would not be an integer")
    return PatchGridSpec(image_size, patch_size, grid_side, span // (grid_side - 1))


def grid_from_tuple(values) -> PatchGridSpec:
    """Rebuild a stored grid, checking the stride is consistent."""
    image_size, patch_size, grid_side, stride = (int(v) for v in values)
    grid = make_grid(image_size, patch_size, grid_side)
    if grid.stride != stride:
        raise ConfigError(f"stored stride {stride} disagrees with derived stride {grid.stride}")
    return grid


def position_of(grid: PatchGridSpec, i: int) -> tuple[int, int]:
    if not 0 <= i < grid.n_positions:
        raise IndexError(f"patch index {i} out of range [0, {grid.n_positions})")
    return (i % grid.grid_side) * grid.stride, (i // grid.grid_side) * grid.stride


def extract_patch(image: np.ndarray, grid: PatchGridSpec, i: int) -> np.ndarray:
    """Crop the C x k x k patch with index ``i`` from a C x I x I image."""
    _check_image(image, grid)
    x, y = position_of(grid, i)
    k = grid.patch_size
    return image[:, y:y + k, x:x + k].copy()


def extract_all_patches(image: np.ndarray, grid: PatchGridSpec) -> np.ndarray:
    """All patches in index order, shape p x C x k x k."""
    _check_image(image, grid)
    k = grid.patch_size
    return np.stack([image[:, y:y + k, x:x + k] for x, y in grid.positions()])


def _check_image(image: np.ndarray, grid: PatchGridSpec) -> None:
    if image.ndim != 3 or image.shape[1] != grid.image_size or image.shape[2] != grid.image_size:
        raise DimensionError(
            f"image of shape {image.shape} does not match grid image size {grid.image_size}")


def cells_in_rect(grid: PatchGridSpec, rect) -> np.ndarray:
    """Boolean g x g mask of cells whose patch centre falls inside ``rect``.

    ``rect`` is ``(x0, y0, width, height)`` in pixels, half-open.
    """
    x0, y0, w, h = rect
    pos = grid.positions().astype(float) + grid.patch_size / 2.0
    inside = (pos[:, 0] >= x0) & (pos[:, 0] < x0 + w) & (pos[:, 1] >= y0) & (pos[:, 1] < y0 + h)
    return inside.reshape(grid.grid_side, grid.grid_side)
