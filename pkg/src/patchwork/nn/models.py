from __future__ import annotations

import numpy as np

from .layers import (BatchNorm2d, Conv2d, Dense, Dropout, GlobalAvgPool, MaxPool2d,
                     ReLU, Sequential)


def small_cnn(in_channels: int, n_classes: int, rng: np.random.Generator,
              dropout: float | None = None, widths=(16, 32, 64)) -> Sequential:
    """Three conv-BN-ReLU stages (max-pool after the first two), global average
    pool, optional dropout, dense head. Spatial input must be divisible by 4."""
    c1, c2, c3 = widths
    layers = [
        ("conv1", Conv2d(in_channels, c1, 3, rng, padding=1)), ("bn1", BatchNorm2d(c1)),
        ("relu1", ReLU()), ("pool1", MaxPool2d()),
        ("conv2", Conv2d(c1, c2, 3, rng, padding=1)), ("bn2", BatchNorm2d(c2)),
        ("relu2", ReLU()), ("pool2", MaxPool2d()),
        ("conv3", Conv2d(c2, c3, 3, rng, padding=1)), ("bn3", BatchNorm2d(c3)),
        ("relu3", ReLU()), ("gap", GlobalAvgPool()),
    ]
    if dropout:
        layers.append(("dropout", Dropout(dropout, rng)))
    layers.append(("fc", Dense(c3, n_classes, rng)))
    return Sequential(layers)
