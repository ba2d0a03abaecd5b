"""Training/evaluation runners shared by the command line and the acceptance suite."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics, segnet, uda
from .config import ExperimentConfig
from .synthscenes import CLASSES, Dataset, SplitData, derive_seed, load_dataset

STREAM_RUN = 11

ABLATION_ROWS = {
    "basic": {"variant": "basic"},
    "fda": {"variant": "fda"},
    "ce_full": {"variant": "ce_full"},
    "ciss-source-only": {"variant": "ciss", "lambda_t": 0.0},
    "ciss-target-only": {"variant": "ciss", "lambda_s": 0.0},
    "ciss": {"variant": "ciss"},
}
TABLE_COLUMNS = ("kind", "row", "seed", "miou", "std")


def run_seed(master_seed: int, seed: int) -> int:
    return derive_seed(master_seed, seed, STREAM_RUN)


# metrics CSV ----------------------------------------------------------------------------


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def write_metrics(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(uda.METRIC_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in uda.METRIC_COLUMNS])


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != uda.METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [{c: (int(v) if c == "iter" else float(v)) for c, v in zip(header, line)} for line in reader]


# checkpoints --------------------------------------------------------------------------------


def save_state(path: str | Path, state: uda.TrainState) -> None:
    """Student, teacher, both Adam moments and the iteration counters in one file."""
    records = []
    for prefix, arrays in (
        ("student.", state.student.arrays()),
        ("teacher.", state.teacher.arrays()),
        ("adam_m.", state.opt.m),
        ("adam_v.", state.opt.v),
    ):
        records += [(prefix + k, v) for k, v in arrays.items()]
    records.append(("iteration", np.array([state.iteration])))
    records.append(("adam_step", np.array([state.opt.step])))
    segnet.write_checkpoint(path, records)


@dataclass
class Checkpoint:
    student: segnet.SegNetParams
    teacher: segnet.SegNetParams
    opt: uda.AdamState
    iteration: int


def load_state(path: str | Path) -> Checkpoint:
    arrays = segnet.read_checkpoint(path)
    student = segnet.params_from_arrays(arrays, "student.")
    teacher = segnet.params_from_arrays(arrays, "teacher.")
    names = student.names()
    try:
        m = {k: arrays["adam_m." + k] for k in names}
        v = {k: arrays["adam_v." + k] for k in names}
        iteration = int(arrays["iteration"][0])
        step = int(arrays["adam_step"][0])
    except KeyError as exc:
        raise segnet.CheckpointError(f"{path}: missing record {exc}") from None
    return Checkpoint(student, teacher, uda.AdamState(step, m, v), iteration)


# training / evaluation ----------------------------------------------------------------------------


def train_run(cfg: ExperimentConfig, data: Dataset, seed: int, on_row=None) -> tuple[uda.TrainState, list[dict]]:
    return uda.train(
        cfg.train_config(),
        data.src_train.images,
        data.src_train.labels,
        data.tgt_train.images,
        run_seed(cfg.master_seed, seed),
        on_row=on_row,
    )


def confusion(params: segnet.SegNetParams, split: SplitData) -> np.ndarray:
    pred = segnet.predict(params, split.images)
    cm = metrics.new_confusion(len(CLASSES))
    for p, t in zip(pred, split.labels):
        cm = metrics.confusion_update(cm, p, t)
    return cm


def eval_params(state, which: str) -> segnet.SegNetParams:
    return state.teacher if which == "teacher" else state.student


def run_cell(cfg: ExperimentConfig, seed: int) -> float:
    """Train one (config, seed) cell and return target-val mIoU of ``cfg.eval_model``."""
    data = load_dataset(cfg.data_dir)
    state, _ = train_run(cfg, data, seed)
    return float(metrics.miou(confusion(eval_params(state, cfg.eval_model), data.tgt_val)))


def _cell_job(args):
    cfg, seed = args
    return run_cell(cfg, seed)


def max_workers() -> int:
    raw = os.environ.get("CISS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def run_cells(jobs: list[tuple[ExperimentConfig, int]]) -> list[float]:
    """Run independent cells, in parallel when CISS_THREADS > 1; order is preserved."""
    workers = min(max_workers(), len(jobs))
    if workers <= 1:
        return [_cell_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_cell_job, jobs))


# tables ------------------------------------------------------------------------------------------


def table_rows(named: dict[str, ExperimentConfig], seeds: list[int], cache: dict | None = None) -> list[dict]:
    """Cell rows (row × seed) followed by one aggregate (mean, sample std) row per name.

    ``cache`` maps (config, seed) to mIoU; cells already in it are not retrained
    and new results are added to it.
    """
    cache = {} if cache is None else cache
    jobs = [(c, s) for c in named.values() for s in seeds]
    todo = list(dict.fromkeys(j for j in jobs if j not in cache))
    cache.update(zip(todo, run_cells(todo)))
    cells, aggregates = [], []
    for name, cfg in named.items():
        vals = [cache[(cfg, s)] for s in seeds]
        cells += [{"kind": "cell", "row": name, "seed": s, "miou": v, "std": ""} for s, v in zip(seeds, vals)]
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        aggregates.append({"kind": "aggregate", "row": name, "seed": "", "miou": float(np.mean(vals)), "std": std})
    return cells + aggregates


def write_table(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], str) else _fmt(r[c]) for c in TABLE_COLUMNS])


def read_table(path: str | Path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            out.append(
                {
                    "kind": r["kind"],
                    "row": r["row"],
                    "seed": int(r["seed"]) if r["seed"] else "",
                    "miou": float(r["miou"]),
                    "std": float(r["std"]) if r["std"] else "",
                }
            )
    return out


def aggregates(rows: list[dict]) -> dict[str, float]:
    return {r["row"]: r["miou"] for r in rows if r["kind"] == "aggregate"}


def cells_by_row(rows: list[dict]) -> dict[str, dict[int, float]]:
    out: dict[str, dict[int, float]] = {}
    for r in rows:
        if r["kind"] == "cell":
            out.setdefault(r["row"], {})[r["seed"]] = r["miou"]
    return out


def ablation_configs(cfg: ExperimentConfig) -> dict[str, ExperimentConfig]:
    return {name: cfg.with_values(**changes) for name, changes in ABLATION_ROWS.items()}


def sweep_configs(cfg: ExperimentConfig, param: str, values: list[float]) -> dict[str, ExperimentConfig]:
    if param not in ("lambda_s", "lambda_t", "beta"):
        raise ValueError(f"sweep parameter must be lambda_s, lambda_t or beta, got {param!r}")
    return {f"{param}={v:g}": cfg.with_values(variant="ciss", **{param: float(v)}) for v in values}


def invariance_point_configs(cfg: ExperimentConfig, lambdas: list[float]) -> dict[str, ExperimentConfig]:
    """Encoder-feature vs softmax-output invariance over a λ_s grid (λ_t held at the config value)."""
    out = {}
    for point in ("encoder", "output"):
        for lam in lambdas:
            out[f"{point}:lambda_s={lam:g}"] = cfg.with_values(variant="ciss", invariance_point=point, lambda_s=float(lam))
    return out


def best_point_per_seed(rows: list[dict], lambdas: list[float]) -> dict[int, tuple[float, float]]:
    """For each seed, (encoder, output) mIoU at the λ with the best mean for that point."""
    cells = cells_by_row(rows)
    agg = aggregates(rows)
    best = {}
    for point in ("encoder", "output"):
        name = max((f"{point}:lambda_s={lam:g}" for lam in lambdas), key=lambda n: agg[n])
        best[point] = cells[name]
    return {s: (best["encoder"][s], best["output"][s]) for s in best["encoder"]}


# curve export ------------------------------------------------------------------------------------


def smooth_curves(rows: list[dict], window: int) -> list[dict]:
    """Trailing moving average of every loss column (plot-ready)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    cols = [c for c in uda.METRIC_COLUMNS if c != "iter"]
    data = np.array([[r[c] for c in cols] for r in rows], dtype=np.float64).reshape(len(rows), len(cols))
    csum = np.cumsum(np.vstack([np.zeros((1, len(cols))), data]), axis=0)
    out = []
    for i, r in enumerate(rows):
        lo = max(0, i + 1 - window)
        avg = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
        out.append({"iter": r["iter"], **{c: float(a) for c, a in zip(cols, avg)}})
    return out
