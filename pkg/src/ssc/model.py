"""The selective-context model family.

Heterogeneous context features are embedded into a common space, scored
against human-object pair features by a softmax gate, pooled, concatenated
onto each pair, and classified with a max-pooled multiple-instance head.
The same classifier head also backs two reference variants: plain
concatenation of all raw contexts (``fusion``) and pair features alone
(``ho_only``), plus an ablated gate conditioned on the contexts only
(``ssc_context_only``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .contexts import (NUM_BODY_PARTS, NUM_STUFF_CATEGORIES, BodyPartNet,
                       ContextBundle, ProviderRegistry, StuffNet,
                       passthrough_provider, surround_batch)
from .layers import BatchNorm, Linear, MilClassifier, glorot
from .tensor import Tensor

VARIANTS = ("ho_only", "fusion", "ssc", "ssc_context_only")
DEFAULT_SOURCES = ("body_part", "stuff", "surround", "deformation")
GATED_VARIANTS = ("ssc", "ssc_context_only")


@dataclass
class ModelConfig:
    """Dimensions and variant selection for one model instance."""

    variant: str = "ssc"
    s: int = 20
    d_ho: int = 256
    c_z: int = 128
    c_prime: int = 128
    h1: int = 512
    h2: int = 256
    d_part: int = 64
    bodypart_out: int = 1024
    bodypart_k: int = 3
    map_channels: int = 512
    builtin_sources: tuple = ("body_part", "stuff", "surround")
    extra_sources: dict[str, int] = field(default_factory=lambda: {"deformation": 512})
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}' (expected one of {VARIANTS})")
        self.builtin_sources = tuple(self.builtin_sources)
        unknown = [s for s in self.builtin_sources
                   if s not in ("body_part", "stuff", "surround")]
        if unknown:
            raise ValueError(f"unknown builtin sources: {unknown}")
        missing = [name for name in ("s", "d_ho", "c_z", "c_prime", "h1", "h2",
                                     "d_part", "bodypart_out", "map_channels")
                   if getattr(self, name) is None]
        if missing:
            raise ValueError(f"underspecified dims: {', '.join(missing)}")

    @property
    def sources(self) -> tuple[str, ...]:
        return self.builtin_sources + tuple(self.extra_sources)

    @property
    def source_dims(self) -> dict[str, int]:
        builtin = {"body_part": self.bodypart_out, "stuff": NUM_STUFF_CATEGORIES,
                   "surround": self.map_channels}
        dims = {name: builtin[name] for name in self.builtin_sources}
        dims.update(self.extra_sources)
        return dims

    @property
    def num_sources(self) -> int:
        return len(self.sources)

    @property
    def classifier_width(self) -> int:
        if self.variant == "ho_only":
            return self.d_ho
        if self.variant == "fusion":
            return self.d_ho + sum(self.source_dims.values())
        return self.d_ho + self.c_z


class InteractionModel:
    """One model variant: context constructors, optional gate, MIL classifier."""

    def __init__(self, cfg: ModelConfig, providers: ProviderRegistry | None = None):
        self.cfg = cfg
        self.providers = providers if providers is not None else default_providers(cfg)
        rng = np.random.default_rng(cfg.seed)
        self.contexts: dict[str, object] = {}
        self.psi: dict[str, Linear] = {}
        self.theta: Linear | None = None
        self.phi: Linear | None = None
        self.query: Tensor | None = None

        if cfg.variant != "ho_only":
            if "body_part" in cfg.builtin_sources:
                self.contexts["body_part"] = BodyPartNet(cfg.d_part, cfg.bodypart_out,
                                                         rng, k=cfg.bodypart_k)
            if "stuff" in cfg.builtin_sources:
                self.contexts["stuff"] = StuffNet(cfg.map_channels, rng)
        if cfg.variant in GATED_VARIANTS:
            for name in cfg.sources:
                self.psi[name] = Linear(cfg.source_dims[name], cfg.c_z, rng)
            if cfg.variant == "ssc":
                self.theta = Linear(cfg.d_ho, cfg.c_prime, rng)
            else:
                self.query = glorot(rng, 1, cfg.c_prime, shape=(1, cfg.c_prime))
            self.phi = Linear(cfg.c_z, cfg.c_prime, rng)
        self.classifier = MilClassifier(cfg.classifier_width, cfg.h1, cfg.h2, cfg.s, rng)

    # -- parameter bookkeeping ------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for cname, net in self.contexts.items():
            for pname, p in net.params().items():
                out[f"contexts.{cname}.{pname}"] = p
        for sname, lin in self.psi.items():
            out[f"embed.psi.{sname}.w"] = lin.w
            out[f"embed.psi.{sname}.b"] = lin.b
        if self.theta is not None:
            out["gate.theta.w"] = self.theta.w
            out["gate.theta.b"] = self.theta.b
        if self.query is not None:
            out["gate.query"] = self.query
        if self.phi is not None:
            out["gate.phi.w"] = self.phi.w
            out["gate.phi.b"] = self.phi.b
        for lname, layer in self.classifier.layers():
            for pname, p in layer.params().items():
                out[f"classifier.{lname}.{pname}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for lname, layer in self.classifier.layers():
            if isinstance(layer, BatchNorm):
                for bname, buf in layer.buffers().items():
                    out[f"classifier.{lname}.{bname}"] = buf
        return out

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        prefix, _, bname = name.rpartition(".")
        for lname, layer in self.classifier.layers():
            if isinstance(layer, BatchNorm) and prefix == f"classifier.{lname}":
                stats = dict(layer.buffers())
                stats[bname] = value
                layer.set_buffers(stats["running_mean"], stats["running_var"])
                return
        raise KeyError(f"unknown buffer '{name}'")

    # -- forward --------------------------------------------------------------

    def build_contexts(self, batch: dict) -> dict[str, Tensor]:
        """Constructed context features per source, each B x d_i."""
        out: dict[str, Tensor] = {}
        for name in self.cfg.sources:
            if name == "body_part":
                out[name] = self.contexts["body_part"].forward_batch(batch["body_parts"])
            elif name == "stuff":
                out[name] = self.contexts["stuff"].forward_batch(batch["global_vec"])
            elif name == "surround":
                out[name] = surround_batch(batch["feature_map"], batch["masks"])
            else:
                out[name] = batch[name]
        return out

    def forward_batch(self, batch: dict, training: bool) -> tuple[Tensor, dict]:
        """Image-level scores (B x S) for a stacked batch; aux carries gate info."""
        cfg = self.cfg
        pairs: Tensor = batch["pairs"]
        b = batch["batch_size"]
        n = pairs.shape[0] // b
        aux: dict = {"n": n}

        if cfg.variant == "ho_only":
            fused = pairs
        elif cfg.variant == "fusion":
            ctx = self.build_contexts(batch)
            rep = np.repeat(np.arange(b), n)
            blocks = [pairs] + [T.gather_rows(ctx[name], rep) for name in cfg.sources]
            fused = T.concat_cols(blocks)
        else:
            ctx = self.build_contexts(batch)
            z = self._embed_block(ctx, b)
            alpha = self._gate_block(pairs, z, b, n)
            pooled = T.gated_sum(alpha, z, blocks=b)
            fused = T.concat_cols([pairs, pooled])
            aux["alpha"] = alpha.data.reshape(b, n, cfg.num_sources)

        y = self.classifier(fused, training)
        scores, winners = T.grouped_row_max(y, n)
        aux["pair_scores"] = y.data.reshape(b, n, cfg.s)
        aux["winners"] = winners
        return scores, aux

    def _embed_block(self, ctx: dict[str, Tensor], b: int) -> Tensor:
        """Interleaved embedded contexts: rows grouped per image, source order fixed."""
        m = self.cfg.num_sources
        per_source = [self.psi[name](ctx[name]) for name in self.cfg.sources]
        stacked = T.concat_rows(per_source)
        if m == 1:
            return stacked
        # stacked row j*b+i is image i / source j; image-major order wants it at i*m+j
        idx = (np.arange(m)[None, :] * b + np.arange(b)[:, None]).reshape(-1)
        return T.gather_rows(stacked, idx)

    def _gate_block(self, pairs: Tensor, z: Tensor, b: int, n: int) -> Tensor:
        k = self.phi(z)
        if self.cfg.variant == "ssc":
            q = self.theta(pairs)
            logits = T.correlate(q, k, blocks=b)
        else:
            q = T.gather_rows(self.query, np.zeros(b, dtype=np.intp))
            per_image = T.correlate(q, k, blocks=b)
            logits = T.gather_rows(per_image, np.repeat(np.arange(b), n))
        return T.softmax_rows(logits)

    # -- single-image convenience ----------------------------------------------

    def image_scores(self, image, training: bool = False) -> tuple[Tensor, dict]:
        from .synth import make_batch
        batch = make_batch([image], self)
        return self.forward_batch(batch, training)


def default_providers(cfg: ModelConfig) -> ProviderRegistry:
    reg = ProviderRegistry()
    for name, dim in cfg.extra_sources.items():
        reg.register(name, dim, passthrough_provider(dim))
    return reg


# ---------------------------------------------------------------------------
# per-image functional surface


def embed_contexts(bundle: ContextBundle, model: InteractionModel) -> Tensor:
    """Embed each raw context vector into the common dimension, one row per source."""
    if bundle.names != list(model.cfg.sources):
        raise ValueError(f"bundle sources {bundle.names} do not match model "
                         f"sources {list(model.cfg.sources)}")
    rows = []
    for name, vec in bundle.entries:
        expected = model.cfg.source_dims[name]
        if vec.shape[0] != expected:
            raise ValueError(f"source '{name}' has dimension {vec.shape[0]}, "
                             f"expected {expected}")
        rows.append(model.psi[name](Tensor(vec.reshape(1, -1))))
    return T.concat_rows(rows)


def gate(pairs: Tensor, z: Tensor, model: InteractionModel) -> Tensor:
    """Gating matrix alpha (N x M): softmax over per-pair context correlations."""
    if model.theta is None:
        raise ValueError("gate requires the ssc variant")
    q = model.theta(pairs)
    k = model.phi(z)
    return T.softmax_rows(T.correlate(q, k))


def context_only_gate(z: Tensor, model: InteractionModel, n: int) -> Tensor:
    """Ablated gate: one learned query, identical alpha row for every pair."""
    if model.query is None:
        raise ValueError("context_only_gate requires the ssc_context_only variant")
    k = model.phi(z)
    logits = T.correlate(model.query, k)
    alpha_row = T.softmax_rows(logits)
    return T.gather_rows(alpha_row, np.zeros(n, dtype=np.intp))


def pool_context(alpha: Tensor, z: Tensor) -> Tensor:
    """Per-pair pooled context: row j is ``sum_i alpha[j, i] * z[i]``."""
    return T.gated_sum(alpha, z)


def fuse(pairs: Tensor, pooled: Tensor) -> Tensor:
    """Concatenate pair features with pooled context along the feature axis."""
    if pairs.shape[0] != pooled.shape[0]:
        raise ValueError(f"row mismatch: {pairs.shape[0]} pairs vs "
                         f"{pooled.shape[0]} pooled rows")
    return T.concat_cols([pairs, pooled])


def classify_mil(fused: Tensor, model: InteractionModel) -> Tensor:
    """Per-pair classification then max over pairs (eval-mode batch norm)."""
    y = model.classifier(fused, training=False)
    scores, _ = T.row_max_pool(y)
    return scores


def fusion_baseline(pairs: Tensor, bundle: ContextBundle,
                    model: InteractionModel) -> Tensor:
    """Concatenate every raw context onto each pair, classify, max-pool."""
    n = pairs.shape[0]
    blocks = [pairs]
    for name, vec in bundle.entries:
        tiled = T.gather_rows(T.reshape(Tensor(vec), (1, vec.shape[0])),
                              np.zeros(n, dtype=np.intp))
        blocks.append(tiled)
    return classify_mil(T.concat_cols(blocks), model)


# ---------------------------------------------------------------------------
# model file format: text header (name + shape per parameter), then raw
# little-endian float64 payloads in header order

_MAGIC = "SSC-MODEL 1"


def save_model(model: InteractionModel, path: str) -> None:
    params = model.named_params()
    buffers = model.named_buffers()
    header = [_MAGIC, "config " + json.dumps(asdict(model.cfg), sort_keys=True)]
    arrays: list[np.ndarray] = []
    for name, p in params.items():
        header.append("param " + name + " " + " ".join(str(d) for d in p.shape))
        arrays.append(p.data)
    for name, buf in buffers.items():
        header.append("buffer " + name + " " + " ".join(str(d) for d in buf.shape))
        arrays.append(buf)
    header.append("data")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_model(path: str) -> InteractionModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    head, sep, payload = blob.partition(b"\ndata\n")
    if not sep:
        raise ValueError(f"{path}: missing data marker")
    lines = head.decode("ascii").split("\n")
    if lines[0] != _MAGIC:
        raise ValueError(f"{path}: bad magic line {lines[0]!r}")
    if not lines[1].startswith("config "):
        raise ValueError(f"{path}: missing config line")
    raw_cfg = json.loads(lines[1][len("config "):])
    cfg = ModelConfig(**raw_cfg)
    model = InteractionModel(cfg)
    entries = []
    for line in lines[2:]:
        kind, name, *dims = line.split(" ")
        if kind not in ("param", "buffer"):
            raise ValueError(f"{path}: unexpected header entry {line!r}")
        entries.append((kind, name, tuple(int(d) for d in dims)))
    offset = 0
    params = model.named_params()
    for kind, name, shape in entries:
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(payload, dtype="<f8", count=count,
                               offset=offset).reshape(shape).astype(np.float64)
        offset += count * 8
        if kind == "param":
            if name not in params:
                raise ValueError(f"{path}: unknown parameter '{name}'")
            if params[name].shape != shape:
                raise ValueError(f"{path}: shape mismatch for '{name}'")
            params[name].data = values.copy()
            params[name].grad = np.zeros_like(values)
        else:
            model.set_buffer(name, values)
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return model


def param_count(model_or_cfg) -> dict:
    """Exact per-group parameter counts from layer shapes.

    ``trainable`` covers weights, biases, and batch-norm affine parameters;
    batch-norm running statistics are tallied separately.
    """
    model = (model_or_cfg if isinstance(model_or_cfg, InteractionModel)
             else InteractionModel(model_or_cfg))
    groups: dict[str, dict[str, int]] = {}
    for name, p in model.named_params().items():
        top = name.split(".")[0]
        g = groups.setdefault(top, {"weights": 0, "biases": 0, "bn_affine": 0,
                                    "bn_running": 0, "total": 0})
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("gamma", "beta"):
            g["bn_affine"] += p.size
        elif leaf in ("b",):
            g["biases"] += p.size
        else:
            g["weights"] += p.size
        g["total"] += p.size
    for name, buf in model.named_buffers().items():
        top = name.split(".")[0]
        g = groups.setdefault(top, {"weights": 0, "biases": 0, "bn_affine": 0,
                                    "bn_running": 0, "total": 0})
        g["bn_running"] += buf.size
    total = {key: sum(g[key] for g in groups.values())
             for key in ("weights", "biases", "bn_affine", "bn_running", "total")}
    return {"groups": groups, "total": total["total"],
            "bn_running": total["bn_running"], "by_kind": total}
