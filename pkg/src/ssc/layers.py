"""Parameterized layers built on the tensor ops: linear maps, batch norm, MLPs."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
BN_MIN_TRAIN_ROWS = 8


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int,
           shape: tuple | None = None) -> Tensor:
    """Uniform init on +/- sqrt(6 / (fan_in + fan_out))."""
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear:
    """Affine map ``x @ w + b`` with Glorot-initialized weights and zero bias."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in = d_in
        self.d_out = d_out
        self.w = glorot(rng, d_in, d_out)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.w), self.b)

    def params(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


class BatchNorm:
    """Per-feature batch normalization over the rows of a 2-D input.

    Train mode normalizes with the batch mean and (biased) variance and folds
    the batch statistics into running estimates with momentum 0.1.  Eval mode
    is a deterministic affine map using the running estimates.
    """

    def __init__(self, d: int):
        self.d = d
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.running_mean = np.zeros(d)
        self.running_var = np.ones(d)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d:
            raise ValueError(f"batchnorm: expected rows of width {self.d}, got {x.shape}")
        if training:
            if x.shape[0] < BN_MIN_TRAIN_ROWS:
                raise ValueError(
                    f"batchnorm: train mode needs >= {BN_MIN_TRAIN_ROWS} rows, got {x.shape[0]}")
            out = self._train_forward(x)
        else:
            out = self._eval_forward(x)
        return T.add(T.scale_cols(out, self.gamma), self.beta)

    def _train_forward(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x.data - mean) * inv_std
        self.running_mean = (1.0 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean
        self.running_var = (1.0 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var

        def back(g):
            gsum = g.sum(axis=0)
            gdot = (g * xhat).sum(axis=0)
            x.grad += (inv_std / n) * (n * g - gsum - xhat * gdot)

        return T._make("batchnorm_train", xhat, (x,), back)

    def _eval_forward(self, x: Tensor) -> Tensor:
        inv_std = 1.0 / np.sqrt(self.running_var + BN_EPS)
        xhat = (x.data - self.running_mean) * inv_std

        def back(g):
            x.grad += g * inv_std

        return T._make("batchnorm_eval", xhat, (x,), back)

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def set_buffers(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = np.asarray(mean, dtype=np.float64).copy()
        self.running_var = np.asarray(var, dtype=np.float64).copy()


class MilClassifier:
    """Two hidden layers (batch norm + ReLU) and a sigmoid multi-label output."""

    def __init__(self, d_in: int, h1: int, h2: int, s: int, rng: np.random.Generator):
        self.d_in = d_in
        self.fc1 = Linear(d_in, h1, rng)
        self.bn1 = BatchNorm(h1)
        self.fc2 = Linear(h1, h2, rng)
        self.bn2 = BatchNorm(h2)
        self.fc3 = Linear(h2, s, rng)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1] != self.d_in:
            raise ValueError(f"classifier: expected input width {self.d_in}, got {x.shape[1]}")
        h = T.relu(self.bn1(self.fc1(x), training))
        h = T.relu(self.bn2(self.fc2(h), training))
        return T.sigmoid(self.fc3(h))

    def layers(self) -> list[tuple[str, object]]:
        return [("fc1", self.fc1), ("bn1", self.bn1), ("fc2", self.fc2),
                ("bn2", self.bn2), ("fc3", self.fc3)]
