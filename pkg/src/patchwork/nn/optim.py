"""AdamW with decoupled weight decay, and the two learning-rate schedules."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .layers import Parameter


class AdamW:
    """Adam with decoupled weight decay.

    Moments are kept in float64; parameters are written back in their own dtype.
    """

    def __init__(self, params: dict[str, Parameter], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        if lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {lr}")
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad.astype(np.float64)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            w = p.data.astype(np.float64) * (1.0 - self.lr * self.weight_decay)
            w -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data[...] = w.astype(p.data.dtype)


@dataclass(frozen=True)
class LRSchedule:
    """``step``: lr0 * factor**floor(epoch / step_epochs); ``exponential``: lr0 * gamma**epoch."""

    lr0: float
    mode: str = "step"
    step_epochs: int = 40
    step_factor: float = 0.1
    gamma: float = 0.95

    def __post_init__(self):
        if self.mode not in ("step", "exponential"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.lr0 <= 0:
            raise ConfigError(f"initial learning rate must be > 0, got {self.lr0}")

    def __call__(self, epoch: int) -> float:
        return lr_schedule(epoch, self)


def lr_schedule(epoch: int, config: LRSchedule) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be >= 0")
    if config.mode == "step":
        return config.lr0 * config.step_factor ** (epoch // config.step_epochs)
    return config.lr0 * config.gamma ** epoch
