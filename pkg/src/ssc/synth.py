"""Seeded synthetic benchmark with planted relevant-context structure.

Each image gets N pair-feature rows of which at most one carries the class
signal (the rest are distractors), plus four raw context payloads.  Exactly
one source per image is relevant: it carries a class-discriminative
direction at the configured signal-to-noise ratio, while the other sources
are nuisance.  Which source is relevant depends on the category and, in
``pair`` relevance mode, also on a latent group encoded only in the signal
pair row; pair mode additionally plants a decoy class direction in the
other group's source so the relevant source cannot be identified from the
contexts alone.  A configurable fraction of test images has its nuisance
contexts drawn from a mean-shifted distribution.

Generation is counter-seeded per image, so identical configs produce
byte-identical dataset files.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, asdict

import numpy as np

from .tensor import Tensor

SOURCES = ("body_part", "stuff", "surround", "deformation")
NUM_PARTS = 17
NUM_MASKS = 5
ACTIVE_PART_AMP = 2.0
ACTIVE_PARTS = 3
RARE_POOL_SHARE = 0.25

RELEVANCE_MODES = ("category", "pair")
_FIELD_ORDER = ("pairs", "body_parts", "global_vec", "feature_map", "masks", "deformation")


@dataclass
class GenConfig:
    """Everything the generator needs; identical configs give identical bytes."""

    seed: int = 0
    num_images: int = 2500
    s: int = 12
    n: int = 6
    d_ho: int = 48
    d_part: int = 16
    map_channels: int = 16
    map_h: int = 5
    map_w: int = 5
    deform_dim: int = 32
    signal_to_noise: float = 2.5
    pair_signal: float = 0.6
    pair_noise: float = 1.0
    group_amp: float = 2.0
    decoy_strength: float = 1.0
    shift_fraction: float = 0.0
    shift_scale: float = 3.0
    rare_fraction: float = 0.25
    no_interaction_fraction: float = 0.15
    second_label_prob: float = 0.25
    relevance_mode: str = "pair"
    test_fraction: float = 0.2

    def validate(self) -> None:
        problems = []
        for name in ("num_images", "n", "d_ho", "d_part", "map_channels",
                     "map_h", "map_w", "deform_dim"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.s < 2:
            problems.append("s must be >= 2")
        if self.signal_to_noise < 0:
            problems.append("signal_to_noise must be >= 0")
        if self.pair_signal < 0:
            problems.append("pair_signal must be >= 0")
        if self.pair_noise <= 0:
            problems.append("pair_noise must be > 0")
        if self.shift_scale < 0:
            problems.append("shift_scale must be >= 0")
        if self.group_amp < 0:
            problems.append("group_amp must be >= 0")
        if self.decoy_strength < 0:
            problems.append("decoy_strength must be >= 0")
        for name in ("shift_fraction", "rare_fraction", "second_label_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must be in [0, 1]")
        if not 0.0 <= self.no_interaction_fraction < 1.0:
            problems.append("no_interaction_fraction must be in [0, 1)")
        if not 0.0 < self.test_fraction < 1.0:
            problems.append("test_fraction must be in (0, 1)")
        if self.relevance_mode not in RELEVANCE_MODES:
            problems.append(f"relevance_mode must be one of {RELEVANCE_MODES}")
        if self.map_h * self.map_w < 4:
            problems.append("feature map needs at least 4 locations")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    @property
    def num_interaction(self) -> int:
        return self.s - 1

    @property
    def no_interaction_category(self) -> int:
        return self.s - 1

    def rare_pool(self) -> list[int]:
        n_rare = max(1, round(RARE_POOL_SHARE * self.num_interaction))
        if n_rare >= self.num_interaction:
            n_rare = self.num_interaction - 1
        if n_rare <= 0:
            return []
        return list(range(self.num_interaction - n_rare, self.num_interaction))


@dataclass
class SynImage:
    """One generated image: pair features, raw context payloads, labels, tags."""

    id: int
    split: str
    pairs: np.ndarray
    body_parts: np.ndarray
    global_vec: np.ndarray
    feature_map: np.ndarray
    masks: np.ndarray
    deformation: np.ndarray
    labels: np.ndarray
    meta: dict


class SynDataset:
    def __init__(self, config: GenConfig, images: list[SynImage]):
        self.config = config
        self.images = images

    def split_images(self, split: str) -> list[SynImage]:
        return [im for im in self.images if im.split == split]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for im in self.images:
            for name in _FIELD_ORDER:
                h.update(np.ascontiguousarray(getattr(im, name), dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(im.labels, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class _Latents:
    """Seed-determined class/source directions shared by every image."""

    pair_dirs: np.ndarray
    group_dirs: np.ndarray
    ctx_dirs: dict
    part_marker: np.ndarray


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    m = rng.normal(size=(rows, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _latents(cfg: GenConfig) -> _Latents:
    rng = np.random.default_rng([cfg.seed, 0])
    dims = {"body_part": cfg.d_part, "stuff": cfg.map_channels,
            "surround": cfg.map_channels, "deformation": cfg.deform_dim}
    ctx_dirs = {name: _unit_rows(rng, cfg.s, dims[name]) for name in SOURCES}
    return _Latents(
        pair_dirs=_unit_rows(rng, cfg.s, cfg.d_ho),
        group_dirs=_unit_rows(rng, 2, cfg.d_ho),
        ctx_dirs=ctx_dirs,
        part_marker=_unit_rows(rng, 1, cfg.d_part)[0],
    )


def relevant_source(cfg: GenConfig, category: int, group: int) -> str:
    """Which source carries the class signal.

    ``category`` mode: a fixed per-category source.  ``pair`` mode: the
    category's parity picks a source pair and the latent pair-group picks
    the slot within it, so the true source is only identifiable jointly
    from the pair features and the contexts.
    """
    if cfg.relevance_mode == "category":
        return SOURCES[category % len(SOURCES)]
    return SOURCES[2 * (category % 2) + group]


def _decoy_category(cfg: GenConfig, category: int) -> int | None:
    """Next same-parity category: a class whose signal legitimately occurs in
    the decoy source, keeping the context marginals symmetric."""
    peers = [c for c in range(cfg.num_interaction)
             if c != category and c % 2 == category % 2]
    if not peers:
        return None
    later = [c for c in peers if c > category]
    return later[0] if later else peers[0]


def _random_masks(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    masks = np.zeros((NUM_MASKS, h, w))
    for k in range(NUM_MASKS):
        r0 = int(rng.integers(h))
        r1 = int(rng.integers(r0, h))
        c0 = int(rng.integers(w))
        c1 = int(rng.integers(c0, w))
        masks[k, r0:r1 + 1, c0:c1 + 1] = 1.0
    areas = masks.sum(axis=(1, 2))
    order = np.argsort(-areas, kind="stable")
    return masks[order]


def _plant(image_fields: dict, source: str, direction: np.ndarray, amp: float) -> None:
    if source == "body_part":
        image_fields["body_parts"] += amp * direction
    elif source == "stuff":
        image_fields["global_vec"] += amp * direction
    elif source == "surround":
        image_fields["feature_map"] += amp * direction
    elif source == "deformation":
        image_fields["deformation"] += amp * direction


def gen_image(cfg: GenConfig, lat: _Latents, image_id: int) -> SynImage:
    split_rng = np.random.default_rng([cfg.seed, 2, image_id])
    split = "test" if split_rng.random() < cfg.test_fraction else "train"
    rng = np.random.default_rng([cfg.seed, 1, image_id])
    snr = cfg.signal_to_noise

    interacting = rng.random() >= cfg.no_interaction_fraction
    rare_pool = cfg.rare_pool()
    frequent_pool = [c for c in range(cfg.num_interaction) if c not in rare_pool]
    if interacting:
        if rare_pool and rng.random() < cfg.rare_fraction:
            primary = int(rng.choice(rare_pool))
        else:
            primary = int(rng.choice(frequent_pool))
    else:
        primary = cfg.no_interaction_category
    group = int(rng.integers(2))
    size = "small" if rng.random() < 0.5 else "large"
    size_mult = 0.6 if size == "small" else 1.2

    labels = np.zeros(cfg.s, dtype=np.int64)
    labels[primary] = 1
    secondary = None
    if interacting and cfg.num_interaction > 1 and rng.random() < cfg.second_label_prob:
        secondary = int(rng.choice([c for c in range(cfg.num_interaction) if c != primary]))
        labels[secondary] = 1

    pairs = rng.normal(0.0, cfg.pair_noise, size=(cfg.n, cfg.d_ho))
    j_sig = int(rng.integers(cfg.n))
    pairs[j_sig] += cfg.group_amp * lat.group_dirs[group]
    if interacting:
        pairs[j_sig] += snr * cfg.pair_signal * size_mult * lat.pair_dirs[primary]
        if secondary is not None:
            j2 = int((j_sig + 1 + rng.integers(cfg.n - 1)) % cfg.n) if cfg.n > 1 else j_sig
            pairs[j2] += snr * cfg.pair_signal * size_mult * lat.pair_dirs[secondary]
            pairs[j2] += cfg.group_amp * lat.group_dirs[group]

    body_parts = rng.normal(size=(NUM_PARTS, cfg.d_part))
    active = rng.choice(NUM_PARTS, size=ACTIVE_PARTS, replace=False)
    body_parts[active] += ACTIVE_PART_AMP * lat.part_marker
    global_vec = rng.normal(size=cfg.map_channels)
    feature_map = rng.normal(size=(cfg.map_h, cfg.map_w, cfg.map_channels))
    masks = _random_masks(rng, cfg.map_h, cfg.map_w)
    deformation = rng.normal(size=cfg.deform_dim)

    payload = {"body_parts": body_parts, "global_vec": global_vec,
               "feature_map": feature_map, "deformation": deformation}
    relevant = relevant_source(cfg, primary, group)
    _plant(payload, relevant, lat.ctx_dirs[relevant][primary], snr)

    planted = {relevant}
    if secondary is not None:
        second_src = relevant_source(cfg, secondary, group)
        _plant(payload, second_src, lat.ctx_dirs[second_src][secondary], snr)
        planted.add(second_src)
    if cfg.relevance_mode == "pair" and interacting and cfg.decoy_strength > 0:
        decoy_src = relevant_source(cfg, primary, 1 - group)
        decoy_cat = _decoy_category(cfg, primary)
        if decoy_src != relevant and decoy_cat is not None:
            _plant(payload, decoy_src, lat.ctx_dirs[decoy_src][decoy_cat],
                   snr * cfg.decoy_strength)
            planted.add(decoy_src)

    shifted = (split == "test" and cfg.shift_fraction > 0.0
               and rng.random() < cfg.shift_fraction)
    if shifted:
        dims = {"body_part": cfg.d_part, "stuff": cfg.map_channels,
                "surround": cfg.map_channels, "deformation": cfg.deform_dim}
        for name in SOURCES:
            if name not in planted:
                direction = rng.normal(size=dims[name])
                direction /= np.linalg.norm(direction)
                _plant(payload, name, direction, cfg.shift_scale)

    meta = {"size": size,
            "frequency": "rare" if (interacting and primary in rare_pool) else "frequent",
            "interaction": "yes" if interacting else "no",
            "relevant_context": relevant,
            "group": str(group),
            "shifted": "yes" if shifted else "no"}
    return SynImage(id=image_id, split=split, pairs=pairs,
                    body_parts=payload["body_parts"],
                    global_vec=payload["global_vec"],
                    feature_map=payload["feature_map"], masks=masks,
                    deformation=payload["deformation"], labels=labels, meta=meta)


def gen_dataset(cfg: GenConfig) -> SynDataset:
    cfg.validate()
    lat = _latents(cfg)
    images = [gen_image(cfg, lat, i) for i in range(cfg.num_images)]
    return SynDataset(cfg, images)


# ---------------------------------------------------------------------------
# line-oriented dataset file: self-describing field names, decimal payloads


def _fmt(x: float) -> str:
    return repr(float(x))


def _fmt_array(a: np.ndarray) -> str:
    return ",".join(_fmt(x) for x in np.asarray(a).reshape(-1))


def _fmt_int_array(a: np.ndarray) -> str:
    return ",".join(str(int(x)) for x in np.asarray(a).reshape(-1))


def save_dataset(ds: SynDataset, path: str) -> None:
    lines = ["syndataset 1"]
    items = []
    for f in fields(ds.config):
        value = getattr(ds.config, f.name)
        text = _fmt(value) if isinstance(value, float) else str(value)
        items.append(f"{f.name}={text}")
    lines.append("config " + " ".join(items))
    for im in ds.images:
        positives = ",".join(str(i) for i in np.flatnonzero(im.labels))
        meta = " ".join(f"{k}={v}" for k, v in sorted(im.meta.items()))
        lines.append(f"image id={im.id} split={im.split} {meta} labels={positives}")
        for name in _FIELD_ORDER:
            arr = getattr(im, name)
            shape = "x".join(str(d) for d in arr.shape)
            data = _fmt_int_array(arr) if name == "masks" else _fmt_array(arr)
            lines.append(f"field id={im.id} name={name} shape={shape} data={data}")
    lines.append(f"end images={len(ds.images)}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


class DatasetFormatError(ValueError):
    pass


def _parse_kv(body: str) -> dict[str, str]:
    out = {}
    for item in body.split(" "):
        key, _, value = item.partition("=")
        out[key] = value
    return out


def load_dataset(path: str) -> SynDataset:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()

    def fail(ln: int, msg: str):
        raise DatasetFormatError(f"{path}: line {ln + 1}: {msg}")

    if not lines or lines[0] != "syndataset 1":
        fail(0, "bad magic line")
    if len(lines) < 2 or not lines[1].startswith("config "):
        fail(1, "missing config line")
    raw = _parse_kv(lines[1][len("config "):])
    kwargs = {}
    for f in fields(GenConfig):
        if f.name not in raw:
            fail(1, f"config missing field '{f.name}'")
        value = raw[f.name]
        try:
            if f.type == "int":
                kwargs[f.name] = int(value)
            elif f.type == "float":
                kwargs[f.name] = float(value)
            else:
                kwargs[f.name] = value.strip("'")
        except ValueError as exc:
            fail(1, f"bad config value for '{f.name}' ({exc})")
    cfg = GenConfig(**kwargs)
    cfg.validate()

    images: list[SynImage] = []
    i = 2
    declared = None
    while i < len(lines):
        line = lines[i]
        if line.startswith("end "):
            declared = int(_parse_kv(line[len("end "):])["images"])
            i += 1
            break
        if not line.startswith("image "):
            fail(i, f"expected image record, got {line.split(' ')[0]!r}")
        head = _parse_kv(line[len("image "):])
        try:
            image_id = int(head["id"])
            split = head["split"]
            label_str = head.get("labels", "")
            positives = [int(x) for x in label_str.split(",") if x != ""]
        except (KeyError, ValueError) as exc:
            fail(i, f"malformed image header ({exc})")
        meta = {k: v for k, v in head.items() if k not in ("id", "split", "labels")}
        labels = np.zeros(cfg.s, dtype=np.int64)
        labels[positives] = 1
        arrays = {}
        for name in _FIELD_ORDER:
            i += 1
            if i >= len(lines):
                fail(i - 1, f"unexpected end of file: image {image_id} missing field '{name}'")
            fline = lines[i]
            if not fline.startswith("field "):
                fail(i, f"expected field '{name}' of image {image_id}")
            kv = _parse_kv(fline[len("field "):])
            if kv.get("name") != name or int(kv.get("id", -1)) != image_id:
                fail(i, f"expected field '{name}' of image {image_id}, "
                        f"got '{kv.get('name')}' of image {kv.get('id')}")
            try:
                shape = tuple(int(d) for d in kv["shape"].split("x"))
                flat = np.array([float(x) for x in kv["data"].split(",")])
            except (KeyError, ValueError) as exc:
                fail(i, f"malformed field line ({exc})")
            if flat.size != int(np.prod(shape)):
                fail(i, f"field '{name}' declares shape {shape} but has {flat.size} values")
            arrays[name] = flat.reshape(shape)
        images.append(SynImage(id=image_id, split=split, pairs=arrays["pairs"],
                               body_parts=arrays["body_parts"],
                               global_vec=arrays["global_vec"],
                               feature_map=arrays["feature_map"],
                               masks=arrays["masks"],
                               deformation=arrays["deformation"],
                               labels=labels, meta=meta))
        i += 1
    if declared is None:
        fail(len(lines) - 1, "missing end marker (truncated file)")
    if declared != len(images):
        fail(len(lines) - 1, f"end marker declares {declared} images, found {len(images)}")
    return SynDataset(cfg, images)


# ---------------------------------------------------------------------------
# batching for the model


def make_batch(images: list[SynImage], model) -> dict:
    """Stack a list of images into the flat tensors the model consumes."""
    cfg = model.cfg
    b = len(images)
    first = images[0]
    n, d_ho = first.pairs.shape
    if d_ho != cfg.d_ho:
        raise ValueError(f"dataset pair width {d_ho} does not match model d_ho {cfg.d_ho}")
    batch: dict = {
        "batch_size": b,
        "pairs": Tensor(np.concatenate([im.pairs for im in images], axis=0)),
        "labels": np.stack([im.labels for im in images]).astype(np.float64),
    }
    if cfg.variant == "ho_only":
        return batch
    hw = first.feature_map.shape[0] * first.feature_map.shape[1]
    d = first.feature_map.shape[2]
    if "body_part" in cfg.sources:
        if first.body_parts.shape[1] != cfg.d_part:
            raise ValueError(f"dataset part width {first.body_parts.shape[1]} does not "
                             f"match model d_part {cfg.d_part}")
        batch["body_parts"] = Tensor(np.concatenate([im.body_parts for im in images], axis=0))
    if "stuff" in cfg.sources or "surround" in cfg.sources:
        if d != cfg.map_channels:
            raise ValueError(f"dataset map channels {d} do not match model "
                             f"map_channels {cfg.map_channels}")
    if "stuff" in cfg.sources:
        batch["global_vec"] = Tensor(np.stack([im.global_vec for im in images]))
    if "surround" in cfg.sources:
        batch["feature_map"] = Tensor(
            np.concatenate([im.feature_map.reshape(hw, d) for im in images], axis=0))
        batch["masks"] = np.stack([im.masks.reshape(-1, hw) for im in images])
    for name in cfg.sources:
        if name in ("body_part", "stuff", "surround"):
            continue
        if name != "deformation":
            raise ValueError(f"dataset has no payload for provider source '{name}'")
        vecs = [model.providers.context(name, im.deformation) for im in images]
        batch[name] = Tensor(np.stack(vecs))
    return batch


def bundle_for_image(image: SynImage, model) -> "ContextBundle":
    """Constructed per-image context bundle (forward values only)."""
    from . import tensor as T
    from .contexts import ContextBundle
    with T.no_grad():
        batch = make_batch([image], model)
        ctx = model.build_contexts(batch)
    entries = [(name, ctx[name].data.reshape(-1)) for name in model.cfg.sources]
    return ContextBundle(entries)
