"""Context feature constructors.

Four context sources feed the gating pipeline: body-part appearance with a
straight-through top-k part selection, a stuff-category probe, masked
surround pooling over a global feature map, and a pluggable provider slot
for anything precomputed upstream (deformation features by default).
Constructors operate on raw payloads; keypoint detection, segmentation and
the like are assumed to have happened elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .layers import Linear
from .tensor import Tensor

NUM_BODY_PARTS = 17
NUM_STUFF_CATEGORIES = 91
DEFAULT_TOP_K = 3
DEFAULT_NUM_MASKS = 5


@dataclass
class BodyPartSet:
    """Per-keypoint region features, one row per body part."""

    parts: np.ndarray

    def __post_init__(self):
        self.parts = np.asarray(self.parts, dtype=np.float64)
        if self.parts.ndim != 2 or self.parts.shape[0] != NUM_BODY_PARTS:
            raise ValueError(f"body parts must be a {NUM_BODY_PARTS} x d matrix, "
                             f"got {self.parts.shape}")


@dataclass
class GlobalFeatureMap:
    """H x W x D activations of the shared global layer."""

    map: np.ndarray

    def __post_init__(self):
        self.map = np.asarray(self.map, dtype=np.float64)
        if self.map.ndim != 3 or min(self.map.shape) < 1:
            raise ValueError(f"feature map must be H x W x D, got {self.map.shape}")

    @property
    def spatial_shape(self) -> tuple[int, int]:
        return self.map.shape[0], self.map.shape[1]

    @property
    def channels(self) -> int:
        return self.map.shape[2]


@dataclass
class SegmentMasks:
    """Binary segment masks ordered by descending pixel area."""

    masks: np.ndarray
    areas: np.ndarray = field(init=False)

    def __post_init__(self):
        m = np.asarray(self.masks)
        if m.ndim != 3:
            raise ValueError(f"masks must be K x H x W, got {m.shape}")
        if not np.isin(m, (0, 1)).all():
            raise ValueError("masks must be binary")
        self.masks = m.astype(np.float64)
        self.areas = self.masks.sum(axis=(1, 2)).astype(np.int64)
        if (self.areas < 1).any():
            raise ValueError("every mask needs at least one positive pixel")
        if not all(self.areas[i] >= self.areas[i + 1] for i in range(len(self.areas) - 1)):
            raise ValueError("masks must be ordered by descending area")


@dataclass
class ContextBundle:
    """Ordered (source name, feature vector) entries for one image."""

    entries: list[tuple[str, np.ndarray]]

    def __post_init__(self):
        names = [name for name, _ in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("context source names must be unique")
        self.entries = [(name, np.asarray(vec, dtype=np.float64).reshape(-1))
                        for name, vec in self.entries]

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def ste_topk_select(scores: Tensor, k: int) -> Tensor:
    """Binary top-k mask over part scores with straight-through gradients.

    Selected positions pass upstream gradients unchanged; non-selected
    positions receive exactly zero.  Ties break toward the lowest index.
    """
    flat = scores if scores.ndim == 1 else T.reshape(scores, (scores.size,))
    return T.ste_topk_mask(flat, k)


class BodyPartNet:
    """Score parts, keep the top k, compress the selection to one vector.

    A linear attention head gives one scalar per part; the k best parts are
    concatenated in descending score order and squeezed through two fully
    connected layers (ReLU between) into the output feature.
    """

    def __init__(self, d_part: int, out_dim: int, rng: np.random.Generator,
                 k: int = DEFAULT_TOP_K):
        if not 1 <= k <= NUM_BODY_PARTS:
            raise ValueError(f"k={k} out of range [1, {NUM_BODY_PARTS}]")
        self.d_part = d_part
        self.out_dim = out_dim
        self.k = k
        self.att = Linear(d_part, 1, rng)
        self.fc1 = Linear(k * d_part, 2 * d_part, rng)
        self.fc2 = Linear(2 * d_part, out_dim, rng)

    def forward_batch(self, parts: Tensor) -> Tensor:
        """Parts stacked as (B*17) x d_part; returns B x out_dim.

        Selection follows the straight-through top-k rule: the chosen part
        rows pass gradients through unchanged, the non-selected rows receive
        exactly zero, and the hard ranking itself contributes no gradient to
        the attention scores.
        """
        rows = parts.shape[0]
        if rows % NUM_BODY_PARTS != 0 or parts.shape[1] != self.d_part:
            raise ValueError(f"expected (B*{NUM_BODY_PARTS}) x {self.d_part} parts, "
                             f"got {parts.shape}")
        b = rows // NUM_BODY_PARTS
        scores = T.reshape(self.att(parts), (rows,))
        idx = self._selection_order(scores.data.reshape(b, NUM_BODY_PARTS))
        picked = T.gather_rows(parts, idx)
        flat = T.reshape(picked, (b, self.k * self.d_part))
        return self.fc2(T.relu(self.fc1(flat)))

    def _selection_order(self, scores: np.ndarray) -> np.ndarray:
        """Flat row indices of each image's top-k parts, best first."""
        order = np.argsort(-scores, axis=1, kind="stable")[:, :self.k]
        base = np.arange(scores.shape[0])[:, None] * NUM_BODY_PARTS
        return (order + base).reshape(-1)

    def __call__(self, parts: BodyPartSet) -> Tensor:
        out = self.forward_batch(Tensor(parts.parts))
        return T.reshape(out, (self.out_dim,))

    def params(self) -> dict[str, Tensor]:
        return {"att.w": self.att.w, "att.b": self.att.b,
                "fc1.w": self.fc1.w, "fc1.b": self.fc1.b,
                "fc2.w": self.fc2.w, "fc2.b": self.fc2.b}


class StuffNet:
    """Independent per-category stuff probabilities from the pooled global vector."""

    def __init__(self, d_in: int, rng: np.random.Generator,
                 n_categories: int = NUM_STUFF_CATEGORIES):
        self.d_in = d_in
        self.n_categories = n_categories
        self.fc = Linear(d_in, n_categories, rng)

    def forward_batch(self, global_vec: Tensor) -> Tensor:
        if global_vec.ndim != 2 or global_vec.shape[1] != self.d_in:
            raise ValueError(f"expected B x {self.d_in} global vectors, got {global_vec.shape}")
        return T.sigmoid(self.fc(global_vec))

    def __call__(self, global_vec: np.ndarray | Tensor) -> Tensor:
        vec = global_vec if isinstance(global_vec, Tensor) else Tensor(global_vec)
        out = self.forward_batch(T.reshape(vec, (1, self.d_in)))
        return T.reshape(out, (self.n_categories,))

    def params(self) -> dict[str, Tensor]:
        return {"fc.w": self.fc.w, "fc.b": self.fc.b}


def surround_context(fmap: GlobalFeatureMap, masks: SegmentMasks) -> Tensor:
    """Masked averages per segment, then an elementwise max over segments."""
    h, w = fmap.spatial_shape
    if masks.masks.shape[1:] != (h, w):
        raise ValueError(f"mask shape {masks.masks.shape[1:]} does not match map {h}x{w}")
    flat_map = Tensor(fmap.map.reshape(h * w, fmap.channels))
    out = surround_batch(flat_map, masks.masks.reshape(1, len(masks.areas), h * w))
    return T.reshape(out, (fmap.channels,))


def surround_batch(flat_map: Tensor, masks: np.ndarray) -> Tensor:
    """Batched surround pooling.

    ``flat_map`` is (B*H*W) x D; ``masks`` is B x K x (H*W) binary.  Each
    mask averages map rows over its positive locations, and the K averages
    reduce by elementwise max.  Returns B x D.
    """
    b, k, hw = masks.shape
    if flat_map.shape[0] != b * hw:
        raise ValueError(f"map rows {flat_map.shape[0]} do not match masks {masks.shape}")
    areas = masks.sum(axis=2)
    if (areas < 1).any():
        raise ValueError("every mask needs at least one positive pixel")
    weights = np.zeros((b * k, b * hw))
    for i in range(b):
        weights[i * k:(i + 1) * k, i * hw:(i + 1) * hw] = masks[i] / areas[i][:, None]
    means = T.weighted_rows(flat_map, weights)
    pooled, _ = T.grouped_row_max(means, k)
    return pooled


ProviderFn = Callable[[np.ndarray], np.ndarray]


class ProviderRegistry:
    """Named external context providers with declared output dimensions."""

    def __init__(self):
        self._providers: dict[str, tuple[int, ProviderFn]] = {}

    def register(self, name: str, dim: int, fn: ProviderFn) -> None:
        if dim < 1:
            raise ValueError("provider dimension must be positive")
        self._providers[name] = (dim, fn)

    def names(self) -> list[str]:
        return list(self._providers)

    def dim(self, name: str) -> int:
        if name not in self._providers:
            raise ValueError(f"unknown context source '{name}'")
        return self._providers[name][0]

    def context(self, name: str, payload: np.ndarray) -> np.ndarray:
        if name not in self._providers:
            raise ValueError(f"unknown context source '{name}'")
        dim, fn = self._providers[name]
        out = np.asarray(fn(np.asarray(payload, dtype=np.float64)), dtype=np.float64).reshape(-1)
        if out.shape[0] != dim:
            raise ValueError(f"provider '{name}' declared dimension {dim} "
                             f"but returned {out.shape[0]}")
        return out


def provider_context(registry: ProviderRegistry, name: str, payload: np.ndarray) -> Tensor:
    """Fetch a provider's vector as a constant input tensor."""
    return Tensor(registry.context(name, payload))


def passthrough_provider(dim: int) -> ProviderFn:
    """Provider that forwards a payload vector as-is, checking its length."""

    def fn(payload: np.ndarray) -> np.ndarray:
        vec = payload.reshape(-1)
        if vec.shape[0] != dim:
            raise ValueError(f"payload length {vec.shape[0]} does not match "
                             f"declared dimension {dim}")
        return vec

    return fn
