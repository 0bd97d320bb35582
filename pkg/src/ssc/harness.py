"""Training/evaluation driver: SGD schedule, instance mAP reports, parameter
accounting, per-tag marginalization, selection histograms, gradient suite."""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .gradcheck import gradcheck
from .layers import BatchNorm, Linear, BN_MIN_TRAIN_ROWS
from .metrics import average_precision
from .model import (InteractionModel, ModelConfig, param_count)
from .optim import OptimizerState, sgd_step
from .synth import GenConfig, SynDataset, SynImage, load_dataset, make_batch
from .tensor import Tensor

OUTPUT_DIR_ENV = "SSC_OUTPUT_DIR"
TAG_AXES = ("size", "frequency", "interaction")


def default_output_dir() -> str:
    return os.environ.get(OUTPUT_DIR_ENV, ".")


@dataclass
class ExperimentConfig:
    """One training run: variant, data, schedule, and model dimensions."""

    variant: str
    dataset: str
    epochs: int = 30
    lr: float = 0.001
    decay: float = 0.1
    decay_epoch: int = 15
    batch_size: int = 32
    seed: int = 0
    out_dir: str | None = None
    c_z: int = 128
    c_prime: int = 128
    h1: int = 512
    h2: int = 256
    bodypart_out: int = 1024

    def __post_init__(self):
        from .model import VARIANTS
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}' (expected one of {VARIANTS})")
        if self.out_dir is None:
            self.out_dir = default_output_dir()

    def validate_files(self) -> None:
        if not os.path.exists(self.dataset):
            raise FileNotFoundError(f"dataset file not found: {self.dataset}")


def model_config_for(cfg: ExperimentConfig, gen: GenConfig) -> ModelConfig:
    return ModelConfig(variant=cfg.variant, s=gen.s, d_ho=gen.d_ho,
                       c_z=cfg.c_z, c_prime=cfg.c_prime, h1=cfg.h1, h2=cfg.h2,
                       d_part=gen.d_part, bodypart_out=cfg.bodypart_out,
                       map_channels=gen.map_channels,
                       extra_sources={"deformation": gen.deform_dim},
                       seed=cfg.seed)


def _train_batches(n_images: int, batch_size: int, pairs_per_image: int,
                   rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n_images)
    chunks = [order[i:i + batch_size] for i in range(0, n_images, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) * pairs_per_image < BN_MIN_TRAIN_ROWS:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


@dataclass
class TrainResult:
    model: InteractionModel
    losses: list[float]
    model_path: str
    curve_path: str


def train(cfg: ExperimentConfig, dataset: SynDataset | None = None) -> TrainResult:
    """SGD training with the step-decay schedule; writes the model and loss curve."""
    if dataset is None:
        cfg.validate_files()
        dataset = load_dataset(cfg.dataset)
    model = InteractionModel(model_config_for(cfg, dataset.config))
    train_images = dataset.split_images("train")
    if not train_images:
        raise ValueError("dataset has no training images")
    params = model.named_params()
    opt = OptimizerState(learning_rate=cfg.lr, decay_factor=cfg.decay,
                         decay_epoch=cfg.decay_epoch)
    losses: list[float] = []
    n = dataset.config.n
    for epoch in range(cfg.epochs):
        opt.epoch = epoch
        rng = np.random.default_rng([cfg.seed, 3, epoch])
        epoch_losses = []
        for chunk in _train_batches(len(train_images), cfg.batch_size, n, rng):
            batch = make_batch([train_images[i] for i in chunk], model)
            scores, _ = model.forward_batch(batch, training=True)
            loss = T.bce_loss(scores, batch["labels"])
            if not np.isfinite(loss.item()):
                raise ValueError(f"training diverged (non-finite loss) at epoch {epoch}")
            T.backward(loss)
            sgd_step(params, opt)
            epoch_losses.append(loss.item())
        losses.append(float(np.mean(epoch_losses)))

    os.makedirs(cfg.out_dir, exist_ok=True)
    stem = f"{cfg.variant}_seed{cfg.seed}"
    model_path = os.path.join(cfg.out_dir, stem + ".model")
    curve_path = os.path.join(cfg.out_dir, stem + "_loss.csv")
    from .model import save_model
    save_model(model, model_path)
    with open(curve_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        for e, value in enumerate(losses):
            writer.writerow([e, repr(value)])
    return TrainResult(model, losses, model_path, curve_path)


@dataclass
class EvalReport:
    """Evaluation summary for one model on one split."""

    variant: str
    split: str
    map: float
    n_images: int
    n_excluded: int
    per_tag: dict
    selection: dict
    sources: tuple
    param_total: int
    wall_clock: float
    image_ids: list = field(default_factory=list)
    image_aps: list = field(default_factory=list)
    image_tags: list = field(default_factory=list)


def evaluate(model: InteractionModel, dataset: SynDataset, split: str = "test",
             batch_size: int = 256) -> EvalReport:
    """Instance mAP plus per-tag and selection breakdowns over one split."""
    started = time.perf_counter()
    images = dataset.split_images(split)
    if not images:
        raise ValueError(f"no images in split '{split}'")
    s = model.cfg.s
    gated = model.cfg.variant in ("ssc", "ssc_context_only")
    ids, aps, tags = [], [], []
    excluded = 0
    sel_sum: dict[int, np.ndarray] = {}
    sel_count: dict[int, int] = {}
    for lo in range(0, len(images), batch_size):
        chunk = images[lo:lo + batch_size]
        with T.no_grad():
            batch = make_batch(chunk, model)
            scores, aux = model.forward_batch(batch, training=False)
        score_rows = scores.data
        for row, image in enumerate(chunk):
            if image.labels.sum() == 0 and image.meta.get("interaction") == "yes":
                excluded += 1
                continue
            ap = average_precision(score_rows[row], image.labels)
            if ap is None:
                excluded += 1
                continue
            ids.append(image.id)
            aps.append(ap)
            tags.append(dict(image.meta))
            if gated:
                winners = aux["winners"][row]
                alpha = aux["alpha"][row]
                for cat in np.flatnonzero(image.labels):
                    row_alpha = alpha[winners[cat]]
                    if cat not in sel_sum:
                        sel_sum[cat] = np.zeros(model.cfg.num_sources)
                        sel_count[cat] = 0
                    sel_sum[cat] += row_alpha
                    sel_count[cat] += 1

    overall = float(np.mean(aps))
    per_tag: dict = {}
    for axis in TAG_AXES:
        cells: dict = {}
        for ap, tag in zip(aps, tags):
            value = tag.get(axis)
            if value is None:
                continue
            cells.setdefault(value, []).append(ap)
        per_tag[axis] = {value: (float(np.mean(cell)), len(cell))
                         for value, cell in sorted(cells.items())}
    selection = {cat: sel_sum[cat] / sel_count[cat] for cat in sorted(sel_sum)}
    counts = param_count(model)
    return EvalReport(variant=model.cfg.variant, split=split, map=overall,
                      n_images=len(aps), n_excluded=excluded, per_tag=per_tag,
                      selection=selection, sources=model.cfg.sources,
                      param_total=counts["total"],
                      wall_clock=time.perf_counter() - started,
                      image_ids=ids, image_aps=aps, image_tags=tags)


def selection_report(model: InteractionModel, dataset: SynDataset,
                     split: str = "test") -> dict[int, np.ndarray]:
    """Per-category mean gating row of the winning pair over positive images."""
    if model.cfg.variant not in ("ssc", "ssc_context_only"):
        raise ValueError("selection report requires a gated variant")
    return evaluate(model, dataset, split).selection


def marginalize(reports: dict[str, EvalReport], baseline: str | None = None) -> list[dict]:
    """Per-tag mAP per variant plus deltas against a baseline variant.

    Empty tag cells are absent from the rows rather than reported as zero.
    """
    if baseline is None:
        baseline = "ho_only" if "ho_only" in reports else next(iter(reports))
    base = reports[baseline]
    rows = []
    for variant, rep in reports.items():
        rows.append({"variant": variant, "axis": "overall", "value": "all",
                     "map": rep.map, "count": rep.n_images,
                     "delta_vs_" + baseline: rep.map - base.map})
        for axis, cells in rep.per_tag.items():
            for value, (tag_map, count) in cells.items():
                delta = None
                base_cell = base.per_tag.get(axis, {}).get(value)
                if base_cell is not None:
                    delta = tag_map - base_cell[0]
                rows.append({"variant": variant, "axis": axis, "value": value,
                             "map": tag_map, "count": count,
                             "delta_vs_" + baseline: delta})
    return rows


def write_metrics_csv(reports: dict[str, EvalReport], path: str,
                      baseline: str | None = None) -> None:
    rows = marginalize(reports, baseline)
    delta_key = [k for k in rows[0] if k.startswith("delta_vs_")][0]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "axis", "value", "metric", "value_num"])
        for row in rows:
            writer.writerow([row["variant"], row["axis"], row["value"], "map",
                             repr(row["map"])])
            writer.writerow([row["variant"], row["axis"], row["value"], "count",
                             row["count"]])
            if row[delta_key] is not None:
                writer.writerow([row["variant"], row["axis"], row["value"],
                                 delta_key, repr(row[delta_key])])


def write_selection_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "source", "mean_alpha"])
        for cat, row in report.selection.items():
            for name, value in zip(report.sources, row):
                writer.writerow([cat, name, repr(float(value))])


def write_params_csv(counts: dict, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "weights", "biases", "bn_affine", "bn_running", "total"])
        for group, g in counts["groups"].items():
            writer.writerow([group, g["weights"], g["biases"], g["bn_affine"],
                             g["bn_running"], g["total"]])
        by = counts["by_kind"]
        writer.writerow(["all", by["weights"], by["biases"], by["bn_affine"],
                         by["bn_running"], by["total"]])


# ---------------------------------------------------------------------------
# gradient suite


@dataclass
class CheckResult:
    name: str
    max_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_err < self.tolerance


def _probe(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Reduce any output to a scalar through a fixed random projection."""
    w = Tensor(rng.normal(size=out.shape))
    return T.sum_all(T.mul(out, w))


def _primitive_checks(seed: int) -> list[tuple[str, callable, list[Tensor], callable]]:
    rng = np.random.default_rng(seed)
    checks = []

    def tensors(*shapes):
        return [Tensor(rng.normal(size=s)) for s in shapes]

    def entry(name, build, *inputs):
        prng = np.random.default_rng([seed, len(checks)])

        def resample():
            for x in inputs:
                x.data = prng.normal(size=x.shape)

        checks.append((name, build, list(inputs), resample))

    a, b = tensors((3, 4), (4, 2))
    prj = np.random.default_rng([seed, 100]).normal(size=(3, 2))
    entry("matmul", lambda: T.sum_all(T.mul(T.matmul(a, b), Tensor(prj))), a, b)

    c, d = tensors((3, 4), (3, 4))
    entry("add", lambda: _probe(T.add(c, d), np.random.default_rng([seed, 101])), c, d)

    e, bias = tensors((3, 4), (4,))
    entry("add_bias", lambda: _probe(T.add(e, bias), np.random.default_rng([seed, 102])),
          e, bias)

    f1, f2 = tensors((3, 4), (3, 4))
    entry("mul", lambda: _probe(T.mul(f1, f2), np.random.default_rng([seed, 103])), f1, f2)

    g1, g2, g3 = tensors((3, 2), (3, 3), (3, 1))
    entry("concat_cols",
          lambda: _probe(T.concat_cols([g1, g2, g3]), np.random.default_rng([seed, 104])),
          g1, g2, g3)

    r1, = tensors((4, 5))
    entry("relu", lambda: _probe(T.relu(r1), np.random.default_rng([seed, 105])), r1)

    s1, = tensors((4, 5))
    entry("sigmoid", lambda: _probe(T.sigmoid(s1), np.random.default_rng([seed, 106])), s1)

    s2, = tensors((4, 3))
    entry("softmax_rows",
          lambda: _probe(T.softmax_rows(s2), np.random.default_rng([seed, 107])), s2)

    bn = BatchNorm(5)
    bn_x, = tensors((10, 5))
    entry("batchnorm_train",
          lambda: _probe(bn(bn_x, training=True), np.random.default_rng([seed, 108])),
          bn_x, bn.gamma, bn.beta)

    bn_eval = BatchNorm(5)
    warm = np.random.default_rng([seed, 109])
    bn_eval.set_buffers(warm.normal(size=5), warm.uniform(0.5, 2.0, size=5))
    bn_ex, = tensors((4, 5))
    entry("batchnorm_eval",
          lambda: _probe(bn_eval(bn_ex, training=False), np.random.default_rng([seed, 110])),
          bn_ex, bn_eval.gamma, bn_eval.beta)

    m1, = tensors((5, 4))
    entry("row_max_pool",
          lambda: _probe(T.row_max_pool(m1)[0], np.random.default_rng([seed, 111])), m1)

    mm, = tensors((12, 3))
    mask = np.random.default_rng([seed, 112]).random(12) < 0.5
    if not mask.any():
        mask[0] = True
    entry("masked_mean",
          lambda: _probe(T.masked_mean(mm, mask), np.random.default_rng([seed, 113])), mm)

    al, zc = tensors((3, 4), (4, 5))
    entry("gated_sum",
          lambda: _probe(T.gated_sum(al, zc), np.random.default_rng([seed, 114])), al, zc)

    alb, zcb = tensors((6, 4), (8, 5))
    entry("gated_sum_blocked",
          lambda: _probe(T.gated_sum(alb, zcb, blocks=2), np.random.default_rng([seed, 115])),
          alb, zcb)

    q, k = tensors((6, 4), (4, 4))
    entry("correlate",
          lambda: _probe(T.correlate(q, k, blocks=2), np.random.default_rng([seed, 116])),
          q, k)

    sc_m, sc_v = tensors((4, 3), (3,))
    entry("scale_cols",
          lambda: _probe(T.scale_cols(sc_m, sc_v), np.random.default_rng([seed, 117])),
          sc_m, sc_v)

    gt, = tensors((6, 3))
    gidx = np.random.default_rng([seed, 118]).integers(6, size=4)
    entry("gather_rows",
          lambda: _probe(T.gather_rows(gt, gidx), np.random.default_rng([seed, 119])), gt)

    sr_m, sr_c = tensors((4, 3), (4,))
    entry("scale_rows",
          lambda: _probe(T.scale_rows(sr_m, sr_c), np.random.default_rng([seed, 120])),
          sr_m, sr_c)

    p_raw = Tensor(np.random.default_rng([seed, 121]).uniform(0.05, 0.95, size=6))
    t_raw = np.random.default_rng([seed, 122]).integers(0, 2, size=6).astype(float)
    entry("bce_loss", lambda: T.bce_loss(p_raw, t_raw), p_raw)

    lin = Linear(4, 3, np.random.default_rng([seed, 123]))
    lx, = tensors((5, 4))
    entry("linear_layer",
          lambda: _probe(lin(lx), np.random.default_rng([seed, 124])), lx, lin.w, lin.b)

    const = Tensor(rng.normal(size=(3, 3)))
    cx, = tensors((3, 3))
    entry("constant", lambda: T.sum_all(const), cx)

    return checks


def _toy_model(seed: int) -> tuple[InteractionModel, dict, np.ndarray]:
    cfg = ModelConfig(variant="ssc", s=3, d_ho=5, c_z=6, c_prime=6, h1=8, h2=8,
                      d_part=4, bodypart_out=7, map_channels=3,
                      extra_sources={"deformation": 4}, seed=seed)
    model = InteractionModel(cfg)
    rng = np.random.default_rng([seed, 55])
    masks = np.zeros((1, 5, 4))
    for k in range(5):
        on = rng.choice(4, size=int(rng.integers(1, 4)), replace=False)
        masks[0, k, on] = 1.0
    batch = {
        "batch_size": 1,
        "pairs": Tensor(rng.normal(size=(2, 5))),
        "body_parts": Tensor(rng.normal(size=(17, 4))),
        "global_vec": Tensor(rng.normal(size=(1, 3))),
        "feature_map": Tensor(rng.normal(size=(4, 3))),
        "masks": masks,
        "deformation": Tensor(rng.normal(size=(1, 4))),
    }
    targets = rng.integers(0, 2, size=(1, 3)).astype(float)
    if targets.sum() == 0:
        targets[0, 0] = 1.0
    return model, batch, targets


def end_to_end_check(seed: int, h: float = 1e-5) -> float:
    """Gradcheck the full gated pipeline (contexts through loss) on a toy."""
    model, batch, targets = _toy_model(seed)

    def f():
        scores, _ = model.forward_batch(batch, training=False)
        return T.bce_loss(scores, targets)

    inputs = [batch["pairs"], batch["body_parts"], batch["global_vec"],
              batch["feature_map"], batch["deformation"]]
    data_err = gradcheck(f, inputs, h=h, resample=_batch_resampler(batch, seed))
    prng = np.random.default_rng([seed, 77])
    param_err = gradcheck(f, list(model.named_params().values()), h=h,
                          max_coords=3, rng=prng,
                          resample=_batch_resampler(batch, seed + 1))
    return max(data_err, param_err)


def _batch_resampler(batch: dict, seed: int):
    state = {"i": 0}

    def resample():
        state["i"] += 1
        rng = np.random.default_rng([seed, 88, state["i"]])
        for key in ("pairs", "body_parts", "global_vec", "feature_map", "deformation"):
            t = batch[key]
            t.data = rng.normal(size=t.shape)

    return resample


def gradient_suite(n_seeds: int = 10, tolerance: float = 1e-4) -> list[CheckResult]:
    """Gradcheck every primitive and the end-to-end graph across seeds."""
    results: dict[str, float] = {}
    for seed in range(n_seeds):
        for name, build, inputs, resample in _primitive_checks(seed):
            err = gradcheck(build, inputs, resample=resample)
            results[name] = max(results.get(name, 0.0), err)
        results["end_to_end"] = max(results.get("end_to_end", 0.0),
                                    end_to_end_check(seed))
    return [CheckResult(name, err, tolerance) for name, err in results.items()]


# ---------------------------------------------------------------------------
# benchmark presets (desk-scale defaults for the comparative experiments)


def benchmark_gen_config(seed: int, shift_fraction: float = 0.5,
                         relevance_mode: str = "pair",
                         num_images: int = 2500, **overrides) -> GenConfig:
    base = dict(seed=seed, num_images=num_images, s=12, n=6, d_ho=48, d_part=16,
                map_channels=16, map_h=5, map_w=5, deform_dim=32,
                signal_to_noise=3.0, pair_signal=0.6, pair_noise=1.0,
                group_amp=4.0, decoy_strength=1.3,
                shift_fraction=shift_fraction, shift_scale=14.0,
                rare_fraction=0.25, no_interaction_fraction=0.15,
                second_label_prob=0.35, relevance_mode=relevance_mode,
                test_fraction=0.2)
    base.update(overrides)
    return GenConfig(**base)


def benchmark_experiment(variant: str, dataset_path: str, seed: int,
                         out_dir: str, **overrides) -> ExperimentConfig:
    base = dict(variant=variant, dataset=dataset_path, epochs=40, lr=1.0,
                decay=0.1, decay_epoch=28, batch_size=64, seed=seed,
                out_dir=out_dir, c_z=64, c_prime=64, h1=64, h2=32,
                bodypart_out=64)
    base.update(overrides)
    return ExperimentConfig(**base)
