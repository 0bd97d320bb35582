"""Dense float64 tensors with reverse-mode differentiation.

The operator set is exactly what the gating pipeline needs: matrix multiply,
elementwise add/multiply, feature-axis concatenation, ReLU, sigmoid, row
softmax, batch normalization, row max with winner routing, masked spatial
averaging, scalar-gated sums, and a binary cross-entropy loss.  Every op
records a node on a tape; ``backward`` replays the tape in exact reverse
creation order, accumulating gradients additively.

Ops with discrete routing decisions (max winners, top-k selection, gathers,
ReLU sign patterns) expose those decisions through ``Node.routing`` so the
finite-difference checker can detect when a perturbation crossed a
non-differentiable boundary.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_serial = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense array plus a same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.node: Node | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class Node:
    """One primitive operation on the tape."""

    __slots__ = ("op", "inputs", "output", "backward_fn", "serial", "routing")

    def __init__(self, op: str, inputs: tuple, output: Tensor,
                 backward_fn: Callable[[np.ndarray], None],
                 routing: np.ndarray | None = None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.serial = next(_serial)
        self.routing = routing


class Graph:
    """Nodes reachable from one output, in forward creation order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    def routing_signature(self) -> list[np.ndarray]:
        return [n.routing for n in self.nodes if n.routing is not None]


def _make(op: str, data: np.ndarray, inputs: tuple,
          backward_fn: Callable[[np.ndarray], None],
          routing: np.ndarray | None = None) -> Tensor:
    out = Tensor(data)
    if _grad_enabled:
        out.node = Node(op, inputs, out, backward_fn, routing)
    return out


def trace(t: Tensor) -> Graph:
    """Collect the op nodes behind ``t``, ordered by creation."""
    nodes: list[Node] = []
    seen: set[int] = set()
    stack = [t]
    while stack:
        cur = stack.pop()
        node = cur.node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.inputs)
    nodes.sort(key=lambda n: n.serial)
    return Graph(nodes)


def backward(loss: Tensor) -> Graph:
    """Reverse-mode pass from a scalar; returns the traversed graph."""
    if loss.data.shape != ():
        raise ValueError("backward requires a scalar output")
    graph = trace(loss)
    loss.grad = np.ones(())
    for node in reversed(graph.nodes):
        node.backward_fn(node.output.grad)
    return graph


def assert_finite(t: Tensor, what: str = "tensor") -> None:
    if not np.all(np.isfinite(t.data)):
        raise ValueError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# primitive operators


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data

    def back(g):
        a.grad += g @ b.data.T
        b.grad += a.data.T @ g

    return _make("matmul", out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; ``b`` may be a vector broadcast over the rows of a matrix."""
    if a.shape == b.shape:
        def back(g):
            a.grad += g
            b.grad += g
        return _make("add", a.data + b.data, (a, b), back)
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def back(g):
            a.grad += g
            b.grad += g.sum(axis=0)
        return _make("add", a.data + b.data[None, :], (a, b), back)
    raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def back(g):
        a.grad += g * b.data
        b.grad += g * a.data

    return _make("mul", a.data * b.data, (a, b), back)


def scale(a: Tensor, c: float) -> Tensor:
    def back(g):
        a.grad += g * c

    return _make("scale", a.data * c, (a,), back)


def scale_rows(a: Tensor, col: Tensor) -> Tensor:
    """Multiply each row of a matrix by a per-row scalar."""
    if a.ndim != 2 or col.shape != (a.shape[0],):
        raise ValueError(f"scale_rows: incompatible shapes {a.shape} and {col.shape}")

    def back(g):
        a.grad += g * col.data[:, None]
        col.grad += (g * a.data).sum(axis=1)

    return _make("scale_rows", a.data * col.data[:, None], (a, col), back)


def scale_cols(a: Tensor, vec: Tensor) -> Tensor:
    """Multiply each column of a matrix by a per-feature scalar."""
    if a.ndim != 2 or vec.shape != (a.shape[1],):
        raise ValueError(f"scale_cols: incompatible shapes {a.shape} and {vec.shape}")

    def back(g):
        a.grad += g * vec.data[None, :]
        vec.grad += (g * a.data).sum(axis=0)

    return _make("scale_cols", a.data * vec.data[None, :], (a, vec), back)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices (or vectors) along the feature axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_cols: empty input")
    axis = parts[0].ndim - 1
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += g[..., lo:hi]

    return _make("concat_cols", np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), back)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows: empty input")
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.grad += g[lo:hi]

    return _make("concat_rows", np.concatenate([p.data for p in parts], axis=0),
                 tuple(parts), back)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def back(g):
        a.grad += g.reshape(a.shape)

    return _make("reshape", a.data.reshape(shape), (a,), back)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def back(g):
        a.grad += g * mask

    return _make("relu", np.where(mask, a.data, 0.0), (a,), back,
                 routing=mask.ravel().astype(np.int8))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        a.grad += g * out * (1.0 - out)

    return _make("sigmoid", out, (a,), back)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stabilized softmax; each output row sums to one."""
    if not np.all(np.isfinite(a.data)):
        raise ValueError("non-finite logits")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        a.grad += out * (g - dot)

    return _make("softmax_rows", out, (a,), back)


def grouped_row_max(a: Tensor, group_size: int) -> tuple[Tensor, np.ndarray]:
    """Column-wise max within consecutive row groups, routing gradients to winners.

    ``a`` has ``B * group_size`` rows; returns a ``B x S`` tensor and the
    winner row offsets (within each group) as an int array of the same shape.
    Ties go to the lowest row index.
    """
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("grouped_row_max: need a non-empty matrix")
    rows, s = a.shape
    if group_size < 1 or rows % group_size != 0:
        raise ValueError(f"grouped_row_max: {rows} rows not divisible into groups of {group_size}")
    b = rows // group_size
    blocks = a.data.reshape(b, group_size, s)
    winners = blocks.argmax(axis=1)
    out = np.take_along_axis(blocks, winners[:, None, :], axis=1)[:, 0, :]

    def back(g):
        gblocks = np.zeros((b, group_size, s))
        np.put_along_axis(gblocks, winners[:, None, :], g[:, None, :], axis=1)
        a.grad += gblocks.reshape(rows, s)

    return _make("grouped_row_max", out, (a,), back,
                 routing=winners.ravel().copy()), winners


def row_max_pool(y: Tensor) -> tuple[Tensor, np.ndarray]:
    """Max over the rows of an ``N x S`` matrix; winners give the argmax row per column."""
    pooled, winners = grouped_row_max(y, y.shape[0])
    return reshape(pooled, (y.shape[1],)), winners[0]


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by index; the backward pass scatter-adds into those rows."""
    idx = np.asarray(indices, dtype=np.intp)

    def back(g):
        np.add.at(a.grad, idx, g)

    return _make("gather_rows", a.data[idx], (a,), back, routing=idx.copy())


def ste_topk_mask(scores: Tensor, k: int, group_size: int | None = None) -> Tensor:
    """Hard top-k indicator over a score vector, straight-through backward.

    Exactly ``k`` ones per group (ties break toward the lowest index).  The
    backward pass copies upstream gradients through selected positions and
    zeroes the rest.
    """
    if scores.ndim != 1:
        raise ValueError("ste_topk_mask: scores must be a vector")
    if not np.all(np.isfinite(scores.data)):
        raise ValueError("ste_topk_mask: non-finite scores")
    n = scores.shape[0]
    gs = n if group_size is None else group_size
    if gs < 1 or n % gs != 0:
        raise ValueError(f"ste_topk_mask: {n} scores not divisible into groups of {gs}")
    if not 1 <= k <= gs:
        raise ValueError(f"ste_topk_mask: k={k} out of range [1, {gs}]")
    blocks = scores.data.reshape(-1, gs)
    order = np.argsort(-blocks, axis=1, kind="stable")
    mask = np.zeros_like(blocks)
    np.put_along_axis(mask, order[:, :k], 1.0, axis=1)
    mask = mask.reshape(n)

    def back(g):
        scores.grad += g * mask

    return _make("ste_topk_mask", mask, (scores,), back,
                 routing=np.flatnonzero(mask))


def masked_mean(fmap: Tensor, mask: np.ndarray) -> Tensor:
    """Average the rows of a ``P x D`` map over the positive entries of a mask."""
    flat = np.asarray(mask).reshape(-1).astype(bool)
    if fmap.ndim != 2 or flat.shape[0] != fmap.shape[0]:
        raise ValueError(f"masked_mean: mask covers {flat.shape[0]} locations, "
                         f"map has {fmap.shape[0]}")
    area = int(flat.sum())
    if area == 0:
        raise ValueError("masked_mean: mask selects no locations")

    def back(g):
        fmap.grad[flat] += g / area

    return _make("masked_mean", fmap.data[flat].mean(axis=0), (fmap,), back)


def weighted_rows(a: Tensor, weights: np.ndarray) -> Tensor:
    """Fixed linear combinations of rows: ``weights @ a`` with constant weights."""
    w = np.asarray(weights, dtype=np.float64)
    if a.ndim != 2 or w.ndim != 2 or w.shape[1] != a.shape[0]:
        raise ValueError(f"weighted_rows: weights {w.shape} incompatible with {a.shape}")

    def back(g):
        a.grad += w.T @ g

    return _make("weighted_rows", w @ a.data, (a,), back)


def correlate(q: Tensor, k: Tensor, blocks: int = 1) -> Tensor:
    """Per-block inner products ``Q_b @ K_b^T``.

    ``q`` is ``(blocks*N) x C`` and ``k`` is ``(blocks*M) x C``; the result is
    ``(blocks*N) x M``.  With ``blocks == 1`` this is a plain ``Q @ K^T``.
    """
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise ValueError(f"correlate: incompatible shapes {q.shape} and {k.shape}")
    if q.shape[0] % blocks or k.shape[0] % blocks:
        raise ValueError("correlate: row counts not divisible by block count")
    n = q.shape[0] // blocks
    m = k.shape[0] // blocks
    c = q.shape[1]
    qb = q.data.reshape(blocks, n, c)
    kb = k.data.reshape(blocks, m, c)
    out = qb @ kb.transpose(0, 2, 1)

    def back(g):
        gb = g.reshape(blocks, n, m)
        q.grad += (gb @ kb).reshape(q.shape)
        k.grad += (gb.transpose(0, 2, 1) @ qb).reshape(k.shape)

    return _make("correlate", out.reshape(blocks * n, m), (q, k), back)


def gated_sum(alpha: Tensor, z: Tensor, blocks: int = 1) -> Tensor:
    """Scalar-gated sums of context rows: row ``j`` is ``sum_i alpha[j,i] * z[i]``.

    ``alpha`` is ``(blocks*N) x M``, ``z`` is ``(blocks*M) x C``; block ``b`` of
    the output is ``alpha_b @ z_b``.
    """
    if alpha.ndim != 2 or z.ndim != 2:
        raise ValueError("gated_sum: expected matrices")
    if alpha.shape[0] % blocks or z.shape[0] % blocks:
        raise ValueError("gated_sum: row counts not divisible by block count")
    n = alpha.shape[0] // blocks
    m = z.shape[0] // blocks
    if alpha.shape[1] != m:
        raise ValueError(f"gated_sum: {alpha.shape[1]} gates per row, {m} context rows")
    c = z.shape[1]
    ab = alpha.data.reshape(blocks, n, m)
    zb = z.data.reshape(blocks, m, c)

    def back(g):
        gb = g.reshape(blocks, n, c)
        alpha.grad += (gb @ zb.transpose(0, 2, 1)).reshape(alpha.shape)
        z.grad += (ab.transpose(0, 2, 1) @ gb).reshape(z.shape)

    return _make("gated_sum", (ab @ zb).reshape(blocks * n, c), (alpha, z), back)


def sum_all(a: Tensor) -> Tensor:
    def back(g):
        a.grad += np.broadcast_to(g, a.shape)

    return _make("sum_all", np.asarray(a.data.sum()), (a,), back)


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.size

    def back(g):
        a.grad += np.broadcast_to(g * inv, a.shape)

    return _make("mean_all", np.asarray(a.data.mean()), (a,), back)


_BCE_EPS = 1e-7


def bce_loss(probs: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1-1e-7]."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    if probs.shape != t.shape:
        raise ValueError(f"bce_loss: length mismatch {probs.shape} vs {t.shape}")
    p = np.clip(probs.data, _BCE_EPS, 1.0 - _BCE_EPS)
    inside = (probs.data > _BCE_EPS) & (probs.data < 1.0 - _BCE_EPS)
    loss = -(t * np.log(p) + (1.0 - t) * np.log1p(-p)).mean()
    inv = 1.0 / p.size

    def back(g):
        probs.grad += np.where(inside, g * inv * (-t / p + (1.0 - t) / (1.0 - p)), 0.0)

    return _make("bce_loss", np.asarray(loss), (probs,), back)
