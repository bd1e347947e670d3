"""SGD with Nesterov momentum and a piecewise-constant learning rate."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np


@dataclass
class SgdConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    nesterov: bool = True
    batch_size: int = 8
    # iteration -> learning rate from that iteration on
    schedule: dict[int, float] = field(default_factory=lambda: {0: 1e-3, 800: 1e-4})

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if any(lr <= 0 for lr in self.schedule.values()):
            raise ValueError("schedule learning rates must be positive")

    def lr_at(self, iteration: int) -> float:
        lr = self.learning_rate
        for start in sorted(self.schedule):
            if iteration >= start:
                lr = self.schedule[start]
        return lr


def sgd_step(
    params: MutableMapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: MutableMapping[str, np.ndarray],
    cfg: SgdConfig,
    iteration: int = 0,
) -> None:
    """Update ``params`` in place; ``state`` holds the momentum buffers.

    Parameters missing from ``grads`` are left alone, buffers included.
    """
    lr = cfg.lr_at(iteration)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        d = g + cfg.weight_decay * p if cfg.weight_decay else g
        if cfg.momentum:
            buf = state.get(name)
            if buf is None:
                buf = np.array(d, dtype=p.dtype, copy=True)
            else:
                buf *= cfg.momentum
                buf += d
            state[name] = buf
            d = d + cfg.momentum * buf if cfg.nesterov else buf
        p -= (lr * d).astype(p.dtype, copy=False)
