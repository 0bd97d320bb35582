"""Central-difference gradient verification for tape-recorded graphs."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class NonDifferentiablePointError(RuntimeError):
    """Raised when perturbations keep crossing discrete routing boundaries."""


def _signature(graph: T.Graph) -> list[np.ndarray]:
    return graph.routing_signature()


def _same_signature(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(f: Callable[[], Tensor],
              inputs: Sequence[Tensor],
              h: float = 1e-5,
              max_coords: int | None = None,
              rng: np.random.Generator | None = None,
              resample: Callable[[], None] | None = None,
              max_resamples: int = 3) -> float:
    """Compare tape gradients against central differences.

    ``f`` rebuilds the forward graph from the live ``inputs`` tensors and
    returns a scalar.  Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.

    If a perturbed evaluation changes any discrete routing decision (max
    winner, top-k pick, ReLU sign), the point is treated as
    non-differentiable: ``resample`` is invoked to draw fresh inputs and the
    check restarts, giving up after ``max_resamples`` attempts.

    ``max_coords`` caps how many coordinates of each input are probed
    (a seeded random subset); all coordinates are probed when it is None.
    """
    for attempt in range(max_resamples + 1):
        for x in inputs:
            x.zero_grad()
        out = f()
        base_sig = _signature(T.backward(out))
        analytic = [x.grad.copy() for x in inputs]

        coord_rng = np.random.default_rng(0) if rng is None else rng
        tie_hit = False
        max_err = 0.0
        for x, a_grad in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            n = flat.shape[0]
            if max_coords is not None and n > max_coords:
                coords = coord_rng.choice(n, size=max_coords, replace=False)
            else:
                coords = range(n)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                plus = f()
                sig_p = _signature(T.trace(plus))
                flat[i] = orig - h
                minus = f()
                sig_m = _signature(T.trace(minus))
                flat[i] = orig
                if not (_same_signature(base_sig, sig_p) and _same_signature(base_sig, sig_m)):
                    tie_hit = True
                    break
                numeric = (plus.item() - minus.item()) / (2.0 * h)
                a = a_grad.reshape(-1)[i]
                err = abs(a - numeric) / max(1.0, abs(a))
                if err > max_err:
                    max_err = err
            if tie_hit:
                break
        if not tie_hit:
            return max_err
        if resample is None or attempt == max_resamples:
            raise NonDifferentiablePointError(
                f"non-differentiable point detected after {attempt + 1} attempt(s)")
        resample()
    raise NonDifferentiablePointError("unreachable")
