"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .stylize import StyleConfig, StyleError
from .uda import LossConfig, LossConfigError, TrainConfig


class ExperimentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    n_src_train: int = 200
    n_tgt_train: int = 200
    n_val: int = 50
    iterations: int = 2000
    batch_size: int = 2
    variant: str = "ciss"
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    beta: float = 0.06
    style_method: str = "fda"
    invariance_point: str = "encoder"
    invariance_norm: str = "frobenius_sq"
    tau: float = 0.968
    ema_alpha: float = 0.999
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.1
    dacs_prob: float = 0.5
    eval_model: str = "student"
    seeds: str = "0,1,2"
    data_dir: str = "data"
    output_dir: str = "runs"

    def __post_init__(self):
        for name in ("n_src_train", "n_tgt_train", "n_val", "batch_size"):
            if getattr(self, name) < 1:
                raise ExperimentConfigError(f"{name} must be >= 1")
        if self.iterations < 0:
            raise ExperimentConfigError("iterations must be >= 0")
        if not 1.0 / 5 < self.tau < 1.0:
            raise ExperimentConfigError("tau must lie in (1/C, 1)")
        for name in ("ema_alpha", "dacs_prob", "warmup_frac"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ExperimentConfigError(f"{name} must lie in [0, 1]")
        for name in ("lr_encoder", "lr_decoder", "weight_decay"):
            if getattr(self, name) < 0:
                raise ExperimentConfigError(f"{name} must be >= 0")
        if self.eval_model not in ("teacher", "student"):
            raise ExperimentConfigError("eval_model must be 'teacher' or 'student'")
        if not self.seed_list():
            raise ExperimentConfigError("seeds must list at least one integer")
        try:
            self.train_config()
        except (LossConfigError, StyleError) as exc:
            raise ExperimentConfigError(str(exc)) from exc

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip()]
        except ValueError as exc:
            raise ExperimentConfigError(f"seeds: {exc}") from exc

    def train_config(self) -> TrainConfig:
        style = StyleConfig(method=self.style_method, beta=self.beta)
        loss = LossConfig(
            variant=self.variant,
            lambda_s=self.lambda_s,
            lambda_t=self.lambda_t,
            invariance_point=self.invariance_point,
            invariance_norm=self.invariance_norm,
            style=style,
        )
        return TrainConfig(
            loss=loss,
            iterations=self.iterations,
            batch_size=self.batch_size,
            lr_encoder=self.lr_encoder,
            lr_decoder=self.lr_decoder,
            weight_decay=self.weight_decay,
            warmup_frac=self.warmup_frac,
            ema_alpha=self.ema_alpha,
            tau=self.tau,
            dacs_prob=self.dacs_prob,
        )

    def with_values(self, **changes) -> "ExperimentConfig":
        return replace(self, **{k: _coerce(k, v) for k, v in changes.items()})


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, value):
    if key not in _TYPES:
        raise ExperimentConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(value, str):
        return value
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ExperimentConfigError(f"{key}: cannot parse {value!r} as {kind}") from None
    return value


def parse_config(text: str) -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ExperimentConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key in values:
            raise ExperimentConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ExperimentConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
