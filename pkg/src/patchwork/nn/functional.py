"""Stateless numeric kernels: convolution, softmax and the smoothed cross-entropy."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, NumericError


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {what}")


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_batch(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                 stride: int = 1, padding: int = 0):
    """Batched 2-D cross-correlation.

    ``x`` is N x C_in x H x W, ``weight`` is C_out x C_in x r x r. Returns the
    N x C_out x H_out x W_out output and the im2col matrix
    (N*H_out*W_out, C_in*r*r) that :func:`conv2d_backward` reuses.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, wc_in, r, r2 = weight.shape
    if wc_in != c_in or r != r2:
        raise DimensionError(f"kernel {weight.shape} does not match input channels {c_in}")
    if padding < 0 or stride < 1:
        raise DimensionError("padding must be >= 0 and stride >= 1")
    if h + 2 * padding < r or w + 2 * padding < r:
        raise DimensionError(f"input {h}x{w} smaller than kernel {r}x{r}")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (r, r), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * r * r)
    out = cols @ weight.reshape(c_out, -1).T
    if bias is not None:
        out += bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))
    return out, cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, weight: np.ndarray,
                    x_shape: tuple, stride: int, padding: int):
    """Gradients of :func:`conv2d_batch` w.r.t. input, kernel and bias."""
    n, c_in, h, w = x_shape
    c_out, _, r, _ = weight.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dweight = (d2.T @ cols).reshape(weight.shape)
    dbias = d2.sum(axis=0)
    dcols = (d2 @ weight.reshape(c_out, -1)).reshape(n, ho, wo, c_in, r, r)
    dxp = np.zeros((n, c_in, h + 2 * padding, w + 2 * padding), dtype=dout.dtype)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # N, C_in, r, r, Ho, Wo
    for i in range(r):
        for j in range(r):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp, dweight, dbias


def conv2d_forward(image: np.ndarray, kernel: np.ndarray, bias=None,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """Single-image convolution: C_in x H x W -> C_out x H_out x W_out."""
    if image.ndim != 3:
        raise DimensionError(f"expected C x H x W input, got shape {image.shape}")
    out, _ = conv2d_batch(image[None], kernel, bias, stride, padding)
    return out[0]


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def smoothed_targets(targets: np.ndarray, n_classes: int, epsilon: float) -> np.ndarray:
    q = np.full((len(targets), n_classes), epsilon / n_classes, dtype=np.float64)
    q[np.arange(len(targets)), targets] += 1.0 - epsilon
    return q


def cross_entropy_batch(logits: np.ndarray, targets, epsilon: float = 0.0):
    """Mean label-smoothed cross-entropy over a batch.

    Returns ``(loss, dlogits)`` where ``dlogits`` is the gradient of the mean
    loss, in the dtype of ``logits``.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing must be in [0, 1), got {epsilon}")
    logits = np.asarray(logits)
    _check_finite(logits, "logits")
    targets = np.asarray(targets, dtype=np.int64)
    n, n_classes = logits.shape
    if np.any(targets < 0) or np.any(targets >= n_classes):
        raise DimensionError(f"target index out of range for {n_classes} classes")
    q = smoothed_targets(targets, n_classes, epsilon)
    logp = log_softmax(logits)
    loss = float(-(q * logp).sum() / n)
    dlogits = (np.exp(logp) - q) / n
    return loss, dlogits.astype(logits.dtype)


def cross_entropy_label_smooth(logits, target: int, epsilon: float) -> float:
    """Smoothed cross-entropy of a single logit vector."""
    logits = np.asarray(logits, dtype=np.float64)
    loss, _ = cross_entropy_batch(logits[None], [target], epsilon)
    return loss
