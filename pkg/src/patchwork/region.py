"""Patch-level attribute classifier conditioned on a learned region embedding."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError
from .grid import PatchGridSpec, extract_patch, grid_from_tuple
from .nn import checkpoint
from .nn.functional import cross_entropy_batch
from .nn.layers import Parameter, Sequential
from .nn.models import small_cnn
from .nn.optim import AdamW, LRSchedule

log = logging.getLogger(__name__)


@dataclass
class RegionTrainConfig:
    lr0: float = 1e-3
    step_epochs: int = 40
    step_factor: float = 0.1
    epochs: int = 90
    batch_size: int = 256
    label_smoothing: float = 0.1
    weight_decay: float = 0.01
    embed_dim: int = 4
    # Patches drawn per image per epoch; 1 is one random patch per image.
    patches_per_image: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size < 1 or self.epochs < 0 or self.patches_per_image < 1:
            raise ConfigError(f"invalid region training config: {self}")
        if self.embed_dim < 0:
            raise ConfigError("embed_dim must be >= 0")

    @property
    def schedule(self) -> LRSchedule:
        return LRSchedule(self.lr0, "step", self.step_epochs, self.step_factor)


class RegionClassifierModel:
    """Small CNN fed a standardized patch concatenated with its region embedding.

    The embedding row of the region index is broadcast to ``embed_dim``
    constant channels of size k x k and appended after the image channels.
    """

    def __init__(self, cnn: Sequential, embedding: np.ndarray, grid: PatchGridSpec, n_classes: int,
                 attribute_name: str, in_channels: int, class_labels=None,
                 norm_mean=None, norm_std=None):
        if embedding.shape[0] != grid.n_positions:
            raise DimensionError(f"embedding has {embedding.shape[0]} rows, grid has {grid.n_positions} positions")
        self.cnn = cnn
        self.embedding = Parameter(np.asarray(embedding, dtype=np.float32))
        self.grid = grid
        self.n_classes = n_classes
        self.attribute_name = attribute_name
        self.in_channels = in_channels
        self.class_labels = list(class_labels) if class_labels is not None else list(range(n_classes))
        self.norm_mean = np.zeros(in_channels, np.float32) if norm_mean is None else np.asarray(norm_mean, np.float32)
        self.norm_std = np.ones(in_channels, np.float32) if norm_std is None else np.asarray(norm_std, np.float32)
        self._last_indices = None

    @classmethod
    def init(cls, grid: PatchGridSpec, in_channels: int, n_classes: int, attribute_name: str,
             rng: np.random.Generator, embed_dim: int = 4, **kw) -> "RegionClassifierModel":
        if grid.patch_size % 4:
            raise ConfigError(f"patch size {grid.patch_size} must be divisible by 4 for the CNN")
        cnn = small_cnn(in_channels + embed_dim, n_classes, rng)
        embedding = rng.normal(0.0, 0.02, size=(grid.n_positions, embed_dim)).astype(np.float32)
        return cls(cnn, embedding, grid, n_classes, attribute_name, in_channels, **kw)

    @property
    def embed_dim(self) -> int:
        return self.embedding.data.shape[1]

    def parameters(self) -> dict[str, Parameter]:
        params = dict(self.cnn.parameters())
        params["embedding"] = self.embedding
        return params

    def astype(self, dtype) -> None:
        self.cnn.astype(dtype)
        self.embedding.data = self.embedding.data.astype(dtype)
        self.embedding.grad = np.zeros_like(self.embedding.data)

    def _input(self, patches: np.ndarray, indices: np.ndarray) -> np.ndarray:
        n, c, k, k2 = patches.shape
        if c != self.in_channels or k != self.grid.patch_size or k2 != k:
            raise DimensionError(f"patches of shape {patches.shape} do not match model "
                                 f"({self.in_channels} x {self.grid.patch_size} x {self.grid.patch_size})")
        indices = np.asarray(indices, dtype=np.int64)
        if np.any(indices < 0) or np.any(indices >= self.grid.n_positions):
            raise IndexError(f"region index out of range [0, {self.grid.n_positions})")
        dtype = self.embedding.data.dtype
        x = ((patches - self.norm_mean.reshape(1, -1, 1, 1)) / self.norm_std.reshape(1, -1, 1, 1)).astype(dtype)
        emb = np.broadcast_to(self.embedding.data[indices][:, :, None, None], (n, self.embed_dim, k, k))
        return np.concatenate([x, emb], axis=1)

    def forward(self, patches: np.ndarray, indices, train: bool = False) -> np.ndarray:
        """Logits (n, n_classes) for a batch of C x k x k patches and their region indices."""
        x = self._input(patches, indices)
        self._last_indices = np.asarray(indices, dtype=np.int64)
        return self.cnn.forward(x, train)

    def backward(self, dlogits: np.ndarray) -> None:
        dx = self.cnn.backward(dlogits)
        demb = dx[:, self.in_channels:].sum(axis=(2, 3))
        np.add.at(self.embedding.grad, self._last_indices, demb)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {k: p.data for k, p in self.parameters().items()}
        out.update(self.cnn.buffers())
        out["norm.mean"] = self.norm_mean
        out["norm.std"] = self.norm_std
        return out

    def to_bytes(self) -> bytes:
        meta = {"kind": "region", "attribute": self.attribute_name, "class_labels": self.class_labels,
                "n_classes": self.n_classes, "in_channels": self.in_channels, "embed_dim": self.embed_dim}
        return checkpoint.encode_checkpoint(self.tensors(), self.grid, meta)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "RegionClassifierModel":
        tensors, grid_t, meta = checkpoint.decode_checkpoint(data)
        if meta.get("kind") != "region" or grid_t is None:
            raise ConfigError("checkpoint does not hold a region classifier")
        grid = grid_from_tuple(grid_t)
        model = cls.init(grid, meta["in_channels"], meta["n_classes"], meta["attribute"],
                         np.random.default_rng(0), embed_dim=meta["embed_dim"],
                         class_labels=meta["class_labels"],
                         norm_mean=tensors["norm.mean"], norm_std=tensors["norm.std"])
        params = model.parameters()
        buffers = model.cnn.buffers()
        for name, arr in tensors.items():
            if name in params:
                if params[name].data.shape != arr.shape:
                    raise DimensionError(f"checkpoint tensor {name} has shape {arr.shape}")
                params[name].data = arr.copy()
                params[name].grad = np.zeros_like(arr)
            elif name in buffers:
                model.cnn.set_buffer(name, arr.copy())
        return model

    @classmethod
    def load(cls, path) -> "RegionClassifierModel":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def forward_with_region(model: RegionClassifierModel, patch: np.ndarray, region_index: int) -> np.ndarray:
    return model.forward(patch[None], [region_index])[0]


def sample_training_patch(image: np.ndarray, grid: PatchGridSpec, rng: np.random.Generator):
    i = int(rng.integers(grid.n_positions))
    return extract_patch(image, grid, i), i


def patch_windows(images: np.ndarray, grid: PatchGridSpec) -> np.ndarray:
    """Strided view N x C x g x g x k x k; ``[:, :, row, col]`` is the patch at (s*col, s*row)."""
    k, s = grid.patch_size, grid.stride
    if images.ndim != 4 or images.shape[2] != grid.image_size or images.shape[3] != grid.image_size:
        raise DimensionError(f"images of shape {images.shape} do not match grid image size {grid.image_size}")
    return sliding_window_view(images, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :grid.grid_side, :grid.grid_side]


def gather_patches(windows: np.ndarray, image_idx: np.ndarray, region_idx: np.ndarray, g: int) -> np.ndarray:
    return windows[image_idx, :, region_idx // g, region_idx % g]


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def add(self, epoch: int, lr: float, loss: float, accuracy: float) -> None:
        self.epochs.append({"epoch": epoch, "lr": lr, "loss": loss, "accuracy": accuracy})

    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def train_region_classifier(images: np.ndarray, labels, grid: PatchGridSpec, config: RegionTrainConfig,
                            attribute_name: str = "attribute", class_labels=None):
    """Jointly train the CNN and region embeddings on random patches.

    Each epoch draws ``patches_per_image`` uniformly random patch positions per
    image. Returns ``(model, TrainLog)``.
    """
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels) or len(images) == 0:
        raise ConfigError("images and labels must be non-empty and of equal length")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ConfigError(f"attribute {attribute_name!r} has a single class in the training data")
    n_classes = int(labels.max()) + 1
    init_ss, sample_ss = np.random.SeedSequence(config.seed).spawn(2)
    rng_init = np.random.default_rng(init_ss)
    rng = np.random.default_rng(sample_ss)
    windows = patch_windows(images, grid)
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = np.maximum(images.std(axis=(0, 2, 3), dtype=np.float64), 1e-6)
    model = RegionClassifierModel.init(grid, images.shape[1], n_classes, attribute_name, rng_init,
                                       embed_dim=config.embed_dim, class_labels=class_labels,
                                       norm_mean=mean, norm_std=std)
    opt = AdamW(model.parameters(), lr=config.lr0, weight_decay=config.weight_decay)
    history = TrainLog()
    schedule = config.schedule
    n = len(images)
    for epoch in range(config.epochs):
        opt.lr = schedule(epoch)
        img_idx = np.repeat(np.arange(n), config.patches_per_image)
        reg_idx = rng.integers(grid.n_positions, size=img_idx.size)
        order = rng.permutation(img_idx.size)
        img_idx, reg_idx = img_idx[order], reg_idx[order]
        loss_sum, hits = 0.0, 0
        for start in range(0, img_idx.size, config.batch_size):
            bi = img_idx[start:start + config.batch_size]
            br = reg_idx[start:start + config.batch_size]
            patches = gather_patches(windows, bi, br, grid.grid_side)
            opt.zero_grad()
            logits = model.forward(patches, br, train=True)
            loss, dlogits = cross_entropy_batch(logits, labels[bi], config.label_smoothing)
            model.backward(dlogits)
            opt.step()
            loss_sum += loss * len(bi)
            hits += int((logits.argmax(axis=1) == labels[bi]).sum())
        history.add(epoch, opt.lr, loss_sum / img_idx.size, hits / img_idx.size)
        log.debug("region epoch %d lr %.2e loss %.4f acc %.3f", epoch, opt.lr,
                  history.epochs[-1]["loss"], history.epochs[-1]["accuracy"])
    return model, history


def predict_all_patches(model: RegionClassifierModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for every patch of every image, shape (N, p, n_classes)."""
    images = np.asarray(images, dtype=np.float32)
    windows = patch_windows(images, model.grid)
    p = model.grid.n_positions
    out = np.empty((len(images), p, model.n_classes), dtype=np.float32)
    img_idx = np.repeat(np.arange(len(images)), p)
    reg_idx = np.tile(np.arange(p), len(images))
    flat = out.reshape(-1, model.n_classes)
    for start in range(0, img_idx.size, batch_size):
        sl = slice(start, start + batch_size)
        patches = gather_patches(windows, img_idx[sl], reg_idx[sl], model.grid.grid_side)
        flat[sl] = model.forward(patches, reg_idx[sl], train=False)
    return out


def config_dict(config: RegionTrainConfig) -> dict:
    return asdict(config)
