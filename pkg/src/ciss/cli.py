"""Command-line entry point: ``ciss <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import shutil
import sys
from pathlib import Path

from . import experiments as ex
from . import metrics, segnet, synthscenes
from .config import ExperimentConfig, ExperimentConfigError, load_config
from .netpbm import NetpbmError, read_ppm, write_ppm
from .stylize import StyleConfig, StyleError, stylize
from .tensor import NonFiniteError
from .uda import BatchError, LossConfigError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = dict(kv.split("=", 1) for kv in (args.set or []) if "=" in kv)
    if len(overrides) != len(args.set or []):
        raise ExperimentConfigError("--set expects key=value")
    return cfg.with_values(**{k.strip(): v.strip() for k, v in overrides.items()}) if overrides else cfg


def _dataset(cfg: ExperimentConfig):
    try:
        return synthscenes.load_dataset(cfg.data_dir)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found at {cfg.data_dir} (run 'ciss gen' first)") from exc


def cmd_gen(args) -> int:
    cfg = _config(args)
    root = Path(args.out or cfg.data_dir)
    if not root.parent.exists():
        raise DataError(f"parent directory {root.parent} does not exist")
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise DataError(f"{root} is not empty; pass --force to overwrite")
        shutil.rmtree(root)
    entries = synthscenes.build_splits(cfg.master_seed, cfg.n_src_train, cfg.n_tgt_train, cfg.n_val)
    manifest = synthscenes.write_dataset(root, entries)
    print(f"wrote {len(entries)} scenes, manifest {manifest}")
    return EXIT_OK


def cmd_stylize(args) -> int:
    content, style = read_ppm(args.input), read_ppm(args.style)
    out = stylize(content, style, StyleConfig(method=args.method, beta=args.beta), seed=args.seed)
    write_ppm(args.output, out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = _dataset(cfg)
    seed = args.seed if args.seed is not None else cfg.seed_list()[0]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        if args.verbose and row["iter"] % 100 == 0:
            print(f"iter {row['iter']} loss {row['loss_total']:.4f} q {row['q_weight']:.3f}", flush=True)

    state, rows = ex.train_run(cfg, data, seed, on_row=progress)
    ex.write_metrics(out / "metrics.csv", rows)
    ex.save_state(out / "checkpoint.bin", state)
    cm = ex.confusion(ex.eval_params(state, cfg.eval_model), data.tgt_val)
    print(f"{cfg.eval_model} tgt_val mIoU {100 * metrics.miou(cm):.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = ex.load_state(args.checkpoint)
    data = _dataset(cfg)
    split = getattr(data, args.split)
    params = ex.eval_params(ckpt, args.model or cfg.eval_model)
    cm = ex.confusion(params, split)
    out = args.out or str(Path(cfg.output_dir) / f"report_{args.split}.csv")
    metrics.write_report(out, cm, synthscenes.CLASSES)
    print(f"{args.split} mIoU {100 * metrics.miou(cm):.2f} pixel_acc {100 * metrics.pixel_accuracy(cm):.2f}")
    return EXIT_OK


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ExperimentConfigError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_ablate(args) -> int:
    cfg = _config(args)
    _dataset(cfg)
    if args.study == "components":
        named = ex.ablation_configs(cfg)
    else:
        named = ex.invariance_point_configs(cfg, _floats(args.values))
    rows = ex.table_rows(named, cfg.seed_list())
    out = args.out or str(Path(cfg.output_dir) / f"ablation_{args.study}.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    ex.write_table(out, rows)
    for name, v in ex.aggregates(rows).items():
        print(f"{name:28s} {100 * v:6.2f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    try:
        named = ex.sweep_configs(cfg, args.param, _floats(args.values))
    except ValueError as exc:
        raise ExperimentConfigError(str(exc)) from None
    _dataset(cfg)
    rows = ex.table_rows(named, cfg.seed_list())
    out = args.out or str(Path(cfg.output_dir) / f"sweep_{args.param}.csv")
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    ex.write_table(out, rows)
    for name, v in ex.aggregates(rows).items():
        print(f"{name:20s} {100 * v:6.2f}")
    return EXIT_OK


def cmd_export_curves(args) -> int:
    try:
        rows = ex.read_metrics(args.metrics)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    curves = ex.smooth_curves(rows, args.window)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ex.uda.METRIC_COLUMNS)
        for r in curves[:: args.every]:
            w.writerow([r["iter"]] + [repr(r[c]) for c in ex.uda.METRIC_COLUMNS[1:]])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ciss", description="condition-invariant segmentation lab")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value experiment file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    sp = with_config(sub.add_parser("gen", help="generate the synthetic dataset"))
    sp.add_argument("--out", help="dataset directory (default: data_dir)")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("stylize", help="stylize one PPM with another")
    sp.add_argument("input")
    sp.add_argument("style")
    sp.add_argument("output")
    sp.add_argument("--method", default="fda", choices=("fda", "reinhard", "jitter"))
    sp.add_argument("--beta", type=float, default=0.06)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_stylize)

    sp = with_config(sub.add_parser("train", help="train one run"))
    sp.add_argument("--seed", type=int)
    sp.add_argument("--verbose", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    sp.add_argument("checkpoint")
    sp.add_argument("--split", default="tgt_val", choices=("src_train", "tgt_val"))
    sp.add_argument("--model", choices=("teacher", "student"), help="default: eval_model")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("ablate", help="component or invariance-point ablation"))
    sp.add_argument("--study", default="components", choices=("components", "invariance-point"))
    sp.add_argument("--values", default="0.1,0.3,1,3,10,30,100", help="lambda_s grid for the invariance-point study")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = with_config(sub.add_parser("sweep", help="sweep one hyperparameter"))
    sp.add_argument("--param", required=True)
    sp.add_argument("--values", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("export-curves", help="moving-average loss curves from a metrics CSV")
    sp.add_argument("metrics")
    sp.add_argument("out")
    sp.add_argument("--window", type=int, default=20)
    sp.add_argument("--every", type=int, default=1)
    sp.set_defaults(func=cmd_export_curves)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ExperimentConfigError, LossConfigError, StyleError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (
        DataError,
        NetpbmError,
        segnet.CheckpointError,
        synthscenes.LabelAccessError,
        metrics.MetricError,
        BatchError,
        OSError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
