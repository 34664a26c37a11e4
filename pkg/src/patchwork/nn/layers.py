"""Layers with explicit forward/backward passes.

Inference (``train=False``) runs the float32 matrix products in float64 and
rounds the result back. BLAS picks different kernels for different batch
sizes; the wider accumulation hides that, so a sample's output does not
depend on which batch it was evaluated in.

Every layer caches what its backward pass needs during ``forward`` and
clears nothing; calling ``backward`` without a preceding ``forward`` raises
:class:`~patchwork.errors.StateError`.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, StateError
from . import functional as F


class Parameter:
    """A named tensor with a gradient buffer of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray):
        self.data = data
        self.grad = np.zeros_like(data)

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0


class Layer:
    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache

    def astype(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        for k, v in self.buffers.items():
            self.buffers[k] = v.astype(dtype)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.params["weight"] = Parameter(
            kaiming_uniform(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel))
        self.params["bias"] = Parameter(np.zeros(c_out, dtype=np.float32))

    def forward(self, x, train):
        w, b = self.params["weight"].data, self.params["bias"].data
        if not train and w.dtype == np.float32:
            out, _ = F.conv2d_batch(x.astype(np.float64), w.astype(np.float64), b.astype(np.float64),
                                    self.stride, self.padding)
            self._cache = None
            return out.astype(np.float32)
        out, cols = F.conv2d_batch(x, w, b, self.stride, self.padding)
        self._cache = (cols, x.shape)
        return out

    def backward(self, dy):
        cols, x_shape = self._take_cache()
        w = self.params["weight"]
        dx, dw, db = F.conv2d_backward(dy, cols, w.data, x_shape, self.stride, self.padding)
        w.grad += dw
        self.params["bias"].grad += db
        return dx


class BatchNorm2d(Layer):
    """Per-channel batch normalization; running statistics with momentum 0.1."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["weight"] = Parameter(np.ones(channels, dtype=np.float32))
        self.params["bias"] = Parameter(np.zeros(channels, dtype=np.float32))
        self.buffers["running_mean"] = np.zeros(channels, dtype=np.float32)
        self.buffers["running_var"] = np.ones(channels, dtype=np.float32)

    def forward(self, x, train):
        gamma = self.params["weight"].data.reshape(1, -1, 1, 1)
        beta = self.params["bias"].data.reshape(1, -1, 1, 1)
        if train:
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            centered = x - mean.astype(x.dtype).reshape(1, -1, 1, 1)
            var = np.square(centered).mean(axis=(0, 2, 3), dtype=np.float64)
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = ((1 - self.momentum) * rm + self.momentum * mean).astype(rm.dtype)
            self.buffers["running_var"] = ((1 - self.momentum) * rv + self.momentum * unbiased).astype(rv.dtype)
            inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
            xhat = centered * inv_std.reshape(1, -1, 1, 1)
            self._cache = (xhat, inv_std)
        else:
            mean = self.buffers["running_mean"].reshape(1, -1, 1, 1)
            inv_std = (1.0 / np.sqrt(self.buffers["running_var"] + self.eps)).astype(x.dtype)
            xhat = (x - mean) * inv_std.reshape(1, -1, 1, 1)
            self._cache = None
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv_std = self._take_cache()
        gamma = self.params["weight"]
        self.params["bias"].grad += dy.sum(axis=(0, 2, 3))
        gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        dxhat = dy * gamma.data.reshape(1, -1, 1, 1)
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=np.float64)
        scale = (inv_std.reshape(1, -1, 1, 1) / m).astype(dy.dtype)
        return (m * dxhat - s1.astype(dy.dtype) - xhat * s2.astype(dy.dtype)) * scale


class ReLU(Layer):
    def forward(self, x, train):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class MaxPool2d(Layer):
    """2x2 max pooling, stride 2; ties go to the first element in row-major order."""

    def forward(self, x, train):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"MaxPool2d needs even spatial dims, got {h}x{w}")
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
        arg = blocks.argmax(axis=-1)
        self._cache = (arg, x.shape)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        arg, (n, c, h, w) = self._take_cache()
        blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
        np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
        blocks = blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return blocks.reshape(n, c, h, w)


class GlobalAvgPool(Layer):
    def forward(self, x, train):
        self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        n, c, h, w = self._take_cache()
        return np.broadcast_to((dy / (h * w))[:, :, None, None], (n, c, h, w)).copy()


class Dropout(Layer):
    """Inverted dropout. ``fixed_mask`` pins the mask (used by gradient checks)."""

    def __init__(self, rate: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng
        self.fixed_mask: np.ndarray | None = None

    def forward(self, x, train):
        if not train or self.rate == 0.0:
            self._cache = np.ones(1, dtype=x.dtype)
            return x
        if self.fixed_mask is not None:
            mask = self.fixed_mask.astype(x.dtype)
        else:
            keep = self.rng.random(x.shape) >= self.rate
            mask = (keep / (1.0 - self.rate)).astype(x.dtype)
        self._cache = mask
        return x * mask

    def backward(self, dy):
        return dy * self._take_cache()


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.params["weight"] = Parameter(kaiming_uniform(rng, (n_out, n_in), n_in))
        self.params["bias"] = Parameter(np.zeros(n_out, dtype=np.float32))

    def forward(self, x, train):
        w, b = self.params["weight"].data, self.params["bias"].data
        if not train and w.dtype == np.float32:
            self._cache = None
            return (x.astype(np.float64) @ w.T.astype(np.float64) + b).astype(np.float32)
        self._cache = x
        return x @ w.T + b

    def backward(self, dy):
        x = self._take_cache()
        w = self.params["weight"]
        w.grad += dy.T @ x
        self.params["bias"].grad += dy.sum(axis=0)
        return dy @ w.data


class Sequential:
    """An ordered stack of named layers forming one differentiable function."""

    def __init__(self, layers: list[tuple[str, Layer]]):
        names = [n for n, _ in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = layers
        self._forwarded = False

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for _, layer in self.layers:
            x = layer.forward(x, train)
        self._forwarded = True
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not self._forwarded:
            raise StateError("backward called before forward")
        for _, layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def parameters(self) -> dict[str, Parameter]:
        return {f"{name}.{k}": p for name, layer in self.layers for k, p in layer.params.items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": b for name, layer in self.layers for k, b in layer.buffers.items()}

    def set_buffer(self, qualified: str, value: np.ndarray) -> None:
        lname, key = qualified.rsplit(".", 1)
        dict(self.layers)[lname].buffers[key] = value

    def astype(self, dtype) -> None:
        for _, layer in self.layers:
            layer.astype(dtype)
