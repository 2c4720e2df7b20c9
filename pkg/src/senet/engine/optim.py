from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {self.weight_decay}")


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
             config: SgdConfig, velocity: list[np.ndarray | None]) -> Sequence[np.ndarray]:
    """In-place heavy-ball update: v <- mu*v + (g + wd*theta); theta <- theta - lr*v.

    ``velocity`` is a list parallel to ``params`` (entries may start as None).
    Parameters whose gradient is None are left untouched.
    """
    if len(velocity) != len(params):
        velocity[:] = [None] * len(params)
    lr, mu, wd = config.learning_rate, config.momentum, config.weight_decay
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        d = g + wd * p if wd else g
        v = velocity[i]
        if v is None:
            v = np.array(d, dtype=p.dtype, copy=True)
        else:
            v *= mu
            v += d
        velocity[i] = v
        p -= p.dtype.type(lr) * v
    return params


class SGD:
    """Momentum SGD over a fixed list of leaf tensors."""

    def __init__(self, params: Sequence[Tensor], config: SgdConfig):
        self.params = list(params)
        self.config = config
        self.velocity: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        cfg = self.config if lr is None else SgdConfig(lr, self.config.momentum, self.config.weight_decay)
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], cfg, self.velocity)
