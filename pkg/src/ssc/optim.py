"""Plain SGD with a single step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class OptimizerState:
    """Learning rate plus a one-shot decay applied from ``decay_epoch`` on."""

    learning_rate: float
    decay_factor: float = 0.1
    decay_epoch: int = 15
    epoch: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must not be negative")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must be in (0, 1]")
        if self.decay_epoch < 1:
            raise ValueError("decay_epoch must be a positive integer")

    def effective_rate(self) -> float:
        if self.epoch >= self.decay_epoch:
            return self.learning_rate * self.decay_factor
        return self.learning_rate


def sgd_step(params: dict[str, Tensor], opt: OptimizerState) -> None:
    """Apply ``p -= rate * grad`` to every parameter and zero the gradients.

    Raises if any gradient is non-finite, naming the offending parameter.
    """
    rate = opt.effective_rate()
    for name, p in params.items():
        if not np.all(np.isfinite(p.grad)):
            raise ValueError(f"non-finite gradient in parameter group '{name}'")
    for p in params.values():
        p.data -= rate * p.grad
        p.zero_grad()
