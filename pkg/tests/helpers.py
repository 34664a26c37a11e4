"""Independent oracles shared by the test modules.

Each oracle is written the slow, obvious way so it shares no code path with
the package implementation it checks.
"""
from __future__ import annotations

import math

import numpy as np

from patchwork.nn.functional import cross_entropy_batch
from patchwork.nn.layers import MaxPool2d, ReLU


def naive_conv2d(x, w, b, stride=1, pad=0):
    """Direct nested-loop cross-correlation for one C x H x W image."""
    c, h, wd = x.shape
    co, ci, r, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - r) // stride + 1
    wo = (wd + 2 * pad - r) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                total = 0.0
                for ch in range(ci):
                    for u in range(r):
                        for v in range(r):
                            total += xp[ch, i * stride + u, j * stride + v] * w[o, ch, u, v]
                out[o, i, j] = total + b[o]
    return out


def naive_pixel_map(values, image_size, patch_size, grid_side, stride):
    """Per-pixel loop: average the values of every patch whose window covers the pixel."""
    vals = np.zeros((image_size, image_size))
    cov = np.zeros((image_size, image_size), dtype=int)
    for py in range(image_size):
        for px in range(image_size):
            hits = []
            for row in range(grid_side):
                for col in range(grid_side):
                    x0, y0 = col * stride, row * stride
                    if x0 <= px < x0 + patch_size and y0 <= py < y0 + patch_size:
                        hits.append(values[row][col])
            cov[py, px] = len(hits)
            vals[py, px] = sum(hits) / len(hits) if hits else 0.0
    return vals, cov


def naive_ece(conf, correct, n_bins):
    """Re-bin with explicit interval tests: bin 0 is [0, 1/n], bin i is (i/n, (i+1)/n]."""
    n = len(conf)
    bins = [[] for _ in range(n_bins)]
    for c, ok in zip(conf, correct):
        placed = False
        for i in range(n_bins):
            lo, hi = i / n_bins, (i + 1) / n_bins
            if (i == 0 and c <= hi) or (lo < c <= hi):
                bins[i].append((c, ok))
                placed = True
                break
        assert placed
    total = 0.0
    for items in bins:
        if items:
            mc = math.fsum(c for c, _ in items) / len(items)
            ma = sum(1 for _, ok in items if ok) / len(items)
            total += len(items) / n * abs(mc - ma)
    return total


def _kink_pattern(net):
    out = []
    for _, layer in net.layers:
        if isinstance(layer, ReLU):
            out.append(layer._cache.copy())
        elif isinstance(layer, MaxPool2d):
            out.append(layer._cache[0].copy())
    return out


def gradient_check(loss_and_grad, loss_only, params, net, rng, h=1e-3, max_coords=512, h_floor=1e-7):
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad()`` runs forward + backward and fills ``params[*].grad``;
    ``loss_only()`` returns the scalar loss. When a perturbation flips a ReLU
    sign or a max-pool winner the two sides straddle a kink, so the step is
    shrunk tenfold until the activation pattern matches the unperturbed one.
    """
    loss_and_grad()
    base = _kink_pattern(net)
    grads = {k: p.grad.copy().ravel() for k, p in params.items()}

    def same(pattern):
        return all(np.array_equal(a, b) for a, b in zip(pattern, base))

    worst = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= max_coords else rng.choice(flat.size, max_coords, replace=False)
        errs = []
        for i in idx:
            step = h
            while True:
                orig = flat[i]
                flat[i] = orig + step
                fp = loss_only()
                pp = _kink_pattern(net)
                flat[i] = orig - step
                fm = loss_only()
                pm = _kink_pattern(net)
                flat[i] = orig
                if (same(pp) and same(pm)) or step <= h_floor:
                    break
                step /= 10
            num = (fp - fm) / (2 * step)
            ana = grads[name][i]
            errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-6))
        worst[name] = max(errs)
    return worst


def ce_loss(logits, y, eps):
    return cross_entropy_batch(logits, y, eps)
