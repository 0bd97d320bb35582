"""Command-line entry points: gen, train, eval, gradcheck, params, report."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

from . import harness
from .harness import (ExperimentConfig, default_output_dir, evaluate,
                      gradient_suite, marginalize, train, write_metrics_csv,
                      write_params_csv, write_selection_csv)
from .model import ModelConfig, load_model, param_count
from .synth import GenConfig, gen_dataset, load_dataset, save_dataset


def _read_config_file(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: line {ln}: expected key=value, got {line!r}")
            out[key.strip()] = value.strip()
    return out


def _gen_config_from_args(args) -> GenConfig:
    values: dict = {}
    if args.config:
        raw = _read_config_file(args.config)
        valid = {f.name: f.type for f in fields(GenConfig)}
        for key, text in raw.items():
            if key not in valid:
                raise ValueError(f"unknown config key '{key}'")
            values[key] = (int(text) if valid[key] == "int"
                           else float(text) if valid[key] == "float" else text)
    for f in fields(GenConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    return GenConfig(**values)


def _add_gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file; flags override it")
    for f in fields(GenConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "int":
            p.add_argument(flag, type=int, default=None)
        elif f.type == "float":
            p.add_argument(flag, type=float, default=None)
        else:
            p.add_argument(flag, default=None)


def _add_model_dim_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--c-z", type=int, default=128)
    p.add_argument("--c-prime", type=int, default=128)
    p.add_argument("--h1", type=int, default=512)
    p.add_argument("--h2", type=int, default=256)
    p.add_argument("--bodypart-out", type=int, default=1024)


def _cmd_gen(args) -> int:
    cfg = _gen_config_from_args(args)
    ds = gen_dataset(cfg)
    save_dataset(ds, args.out)
    train_n = len(ds.split_images("train"))
    test_n = len(ds.split_images("test"))
    print(f"wrote {args.out}: {train_n} train / {test_n} test images, "
          f"s={cfg.s}, sources=4, checksum={ds.checksum()[:16]}")
    return 0


def _cmd_train(args) -> int:
    cfg = ExperimentConfig(variant=args.variant, dataset=args.dataset,
                           epochs=args.epochs, lr=args.lr, decay=args.decay,
                           decay_epoch=args.decay_epoch, batch_size=args.batch_size,
                           seed=args.seed, out_dir=args.out_dir,
                           c_z=args.c_z, c_prime=args.c_prime, h1=args.h1,
                           h2=args.h2, bodypart_out=args.bodypart_out)
    result = train(cfg)
    print(f"trained {args.variant}: loss {result.losses[0]:.4f} -> "
          f"{result.losses[-1]:.4f} over {len(result.losses)} epochs")
    print(f"model: {result.model_path}")
    print(f"loss curve: {result.curve_path}")
    return 0


def _cmd_eval(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.dataset)
    report = evaluate(model, dataset, split=args.split)
    out_dir = args.out_dir or default_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    stem = f"{report.variant}_{args.split}"
    metrics_path = os.path.join(out_dir, stem + "_metrics.csv")
    write_metrics_csv({report.variant: report}, metrics_path, baseline=report.variant)
    print(f"{report.variant} {args.split} mAP {100 * report.map:.2f} "
          f"({report.n_images} images, {report.n_excluded} excluded, "
          f"{report.param_total} params, {report.wall_clock:.2f}s)")
    print(f"metrics: {metrics_path}")
    if report.selection:
        sel_path = os.path.join(out_dir, stem + "_selection.csv")
        write_selection_csv(report, sel_path)
        print(f"selection: {sel_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradient_suite(n_seeds=args.seeds, tolerance=args.tolerance)
    failed = 0
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status} {res.name}: max relative error {res.max_err:.3e} "
              f"(tolerance {res.tolerance:.0e})")
        failed += 0 if res.passed else 1
    if failed:
        print(f"{failed} check(s) failed", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed over {args.seeds} seeds")
    return 0


def _cmd_params(args) -> int:
    extra = {"deformation": args.deformation_dim}
    for item in args.extra_source or []:
        name, sep, dim = item.partition("=")
        if not sep:
            raise ValueError(f"--extra-source expects name=dim, got {item!r}")
        extra[name] = int(dim)
    cfg = ModelConfig(variant=args.variant, s=args.s, d_ho=args.d_ho,
                      c_z=args.c_z, c_prime=args.c_prime, h1=args.h1,
                      h2=args.h2, d_part=args.d_part,
                      bodypart_out=args.bodypart_out,
                      map_channels=args.map_channels, extra_sources=extra)
    counts = param_count(cfg)
    print(f"{'group':<12} {'weights':>10} {'biases':>8} {'bn_affine':>10} "
          f"{'bn_running':>11} {'total':>10}")
    for group, g in counts["groups"].items():
        print(f"{group:<12} {g['weights']:>10} {g['biases']:>8} {g['bn_affine']:>10} "
              f"{g['bn_running']:>11} {g['total']:>10}")
    by = counts["by_kind"]
    print(f"{'all':<12} {by['weights']:>10} {by['biases']:>8} {by['bn_affine']:>10} "
          f"{by['bn_running']:>11} {by['total']:>10}")
    if args.out:
        write_params_csv(counts, args.out)
        print(f"params csv: {args.out}")
    return 0


def _cmd_report(args) -> int:
    dataset = load_dataset(args.dataset)
    reports = {}
    for path in args.model:
        model = load_model(path)
        reports[model.cfg.variant] = evaluate(model, dataset, split=args.split)
    out_dir = args.out_dir or default_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    metrics_path = os.path.join(out_dir, f"report_{args.split}_metrics.csv")
    write_metrics_csv(reports, metrics_path, baseline=args.baseline)
    print(f"metrics: {metrics_path}")
    for variant, rep in reports.items():
        print(f"  {variant}: mAP {100 * rep.map:.2f} ({rep.param_total} params)")
        if rep.selection:
            sel_path = os.path.join(out_dir, f"report_{args.split}_{variant}_selection.csv")
            write_selection_csv(rep, sel_path)
            print(f"  selection: {sel_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssc",
        description="Selective-context gating for multi-instance recognition: "
                    "synthetic benchmarks, training, evaluation, verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True, help="dataset file to write")
    _add_gen_flags(p)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", required=True,
                   choices=["ho_only", "fusion", "ssc", "ssc_context_only"])
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--decay", type=float, default=0.1)
    p.add_argument("--decay-epoch", type=int, default=15)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=None)
    _add_model_dim_flags(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("params", help="exact parameter counts for a variant")
    p.add_argument("--variant", required=True,
                   choices=["ho_only", "fusion", "ssc", "ssc_context_only"])
    p.add_argument("--s", type=int, default=20)
    p.add_argument("--d-ho", type=int, default=256)
    p.add_argument("--d-part", type=int, default=64)
    p.add_argument("--map-channels", type=int, default=512)
    p.add_argument("--deformation-dim", type=int, default=512)
    p.add_argument("--extra-source", action="append",
                   help="additional provider source as name=dim (repeatable)")
    p.add_argument("--out", help="optional csv path")
    _add_model_dim_flags(p)
    p.set_defaults(fn=_cmd_params)

    p = sub.add_parser("report", help="evaluate several models and marginalize")
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", action="append", required=True,
                   help="model file (repeatable)")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--baseline", default=None)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
