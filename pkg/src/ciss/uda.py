"""Loss formulations, self-training machinery and the training step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import segnet
from .segnet import SegNetParams
from .stylize import StyleConfig, fda_pair, stylize
from .synthscenes import IGNORE, derive_seed
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    absolute,
    clamp_min,
    log,
    softmax_channels,
    square,
)

VARIANTS = ("basic", "fda", "ce_full", "ciss")
INVARIANCE_POINTS = ("encoder", "output")
INVARIANCE_NORMS = ("frobenius_sq", "l1")
PROB_FLOOR = 1e-12

METRIC_COLUMNS = (
    "iter",
    "loss_total",
    "loss_ce_src",
    "loss_ce_tgt",
    "loss_inv_src",
    "loss_inv_tgt",
    "q_weight",
    "lr",
)


class LossConfigError(ValueError):
    pass


class BatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    variant: str = "ciss"
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    invariance_point: str = "encoder"
    invariance_norm: str = "frobenius_sq"
    style: StyleConfig = field(default_factory=StyleConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise LossConfigError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lambda_s < 0 or self.lambda_t < 0:
            raise LossConfigError("invariance weights must be non-negative")
        if self.invariance_point not in INVARIANCE_POINTS:
            raise LossConfigError(f"invariance_point must be one of {INVARIANCE_POINTS}")
        if self.invariance_norm not in INVARIANCE_NORMS:
            raise LossConfigError(f"invariance_norm must be one of {INVARIANCE_NORMS}")


@dataclass
class TrainBatch:
    """B source and B target samples with their stylized views.

    ``mix_images``/``mix_labels``/``mix_weights`` are set when DACS mixing fired;
    they replace the original target only in the target cross-entropy term.
    """

    src_images: np.ndarray
    src_labels: np.ndarray
    tgt_images: np.ndarray
    src_to_tgt: Optional[np.ndarray] = None
    tgt_to_src: Optional[np.ndarray] = None
    pseudo_labels: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    mix_images: Optional[np.ndarray] = None
    mix_labels: Optional[np.ndarray] = None
    mix_weights: Optional[np.ndarray] = None


# losses -----------------------------------------------------------------------------


def _onehot_weights(labels: np.ndarray, num_classes: int, weight, dtype) -> tuple[np.ndarray, int]:
    labels = np.asarray(labels)
    valid = labels != IGNORE
    if np.any(labels[valid] >= num_classes):
        raise BatchError(f"label id >= number of classes ({num_classes})")
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), labels.shape) * valid
    axis = labels.ndim - 2  # channel axis of the matching prediction
    classes = np.arange(num_classes).reshape((num_classes, 1, 1))
    onehot = np.expand_dims(labels, axis) == classes
    return (onehot * np.expand_dims(w, axis)).astype(dtype), int(valid.sum())


def cross_entropy(pred: Tensor, labels: np.ndarray, pixel_weight=1.0) -> Tensor:
    """Mean of −log p_true over non-ignored pixels, times ``pixel_weight``.

    ``pred`` is a softmax output (C×H×W or N×C×H×W); ``pixel_weight`` may be a
    scalar or an array broadcastable to ``labels``.
    """
    c = pred.shape[-3]
    if np.asarray(labels).shape != pred.shape[:-3] + pred.shape[-2:]:
        raise ShapeError(f"labels {np.asarray(labels).shape} do not match prediction {pred.shape}")
    weights, n_valid = _onehot_weights(labels, c, pixel_weight, pred.dtype)
    logp = log(clamp_min(pred, PROB_FLOOR))
    return (logp * weights).sum() * (-1.0 / max(n_valid, 1))


def feature_invariance(f1: Tensor, f2: Tensor, norm: str = "frobenius_sq") -> Tensor:
    """Mean squared (or absolute) elementwise difference of two feature maps."""
    if f1.shape != f2.shape:
        raise ShapeError(f"feature maps differ in shape: {f1.shape} vs {f2.shape}")
    diff = f1 - f2
    if norm == "frobenius_sq":
        return square(diff).mean()
    if norm == "l1":
        return absolute(diff).mean()
    raise LossConfigError(f"unknown invariance norm {norm!r}")


class _Views:
    """Lazily computed, per-view forward passes of the student."""

    def __init__(self, net: SegNetParams, images: dict[str, np.ndarray]):
        self.net = net
        self.images = images
        self.dtype = net["enc1.w"].dtype
        self._feat: dict[str, Tensor] = {}
        self._prob: dict[str, Tensor] = {}

    def features(self, name: str) -> Tensor:
        if name not in self._feat:
            img = self.images.get(name)
            if img is None:
                raise BatchError(f"batch is missing the {name!r} view needed by this loss")
            self._feat[name] = segnet.encode(self.net, Tensor(np.asarray(img, dtype=self.dtype)))
        return self._feat[name]

    def probs(self, name: str) -> Tensor:
        if name not in self._prob:
            self._prob[name] = softmax_channels(segnet.decode(self.net, self.features(name)))
        return self._prob[name]


def compose_loss(cfg: LossConfig, batch: TrainBatch, net: SegNetParams) -> tuple[Tensor, dict]:
    """Total loss for ``cfg.variant`` plus a breakdown of unweighted terms."""
    views = _Views(
        net,
        {
            "s": batch.src_images,
            "t": batch.tgt_images,
            "st": batch.src_to_tgt,
            "ts": batch.tgt_to_src,
            "mix": batch.mix_images,
        },
    )
    if batch.pseudo_labels is None or batch.q is None:
        raise BatchError("batch has no pseudolabels")
    q = np.asarray(batch.q, dtype=np.float64).reshape(-1, 1, 1)
    if batch.mix_images is not None:
        tgt_view, tgt_labels, tgt_weight = "mix", batch.mix_labels, batch.mix_weights
    else:
        tgt_view, tgt_labels, tgt_weight = "t", batch.pseudo_labels, q

    ys = batch.src_labels
    src_terms: list[tuple[str, np.ndarray, object]] = []
    tgt_terms = [(tgt_view, tgt_labels, tgt_weight)]
    if cfg.variant == "basic" or cfg.variant == "ciss":
        src_terms = [("s", ys, 1.0)]
    elif cfg.variant == "fda":
        src_terms = [("st", ys, 1.0)]
    elif cfg.variant == "ce_full":
        src_terms = [("st", ys, 1.0), ("s", ys, 1.0)]
        tgt_terms.append(("ts", batch.pseudo_labels, q))

    ce_src = None
    for view, labels, w in src_terms:
        term = cross_entropy(views.probs(view), labels, w)
        ce_src = term if ce_src is None else ce_src + term
    ce_tgt = None
    for view, labels, w in tgt_terms:
        term = cross_entropy(views.probs(view), labels, w)
        ce_tgt = term if ce_tgt is None else ce_tgt + term
    total = ce_src + ce_tgt

    inv = {"src": 0.0, "tgt": 0.0}
    if cfg.variant == "ciss":
        pick = views.features if cfg.invariance_point == "encoder" else views.probs
        for key, lam, a, b in (("src", cfg.lambda_s, "s", "st"), ("tgt", cfg.lambda_t, "t", "ts")):
            if lam == 0:
                continue
            term = feature_invariance(pick(a), pick(b), cfg.invariance_norm)
            inv[key] = term.item()
            total = total + term * lam

    breakdown = {
        "loss_total": total.item(),
        "loss_ce_src": ce_src.item(),
        "loss_ce_tgt": ce_tgt.item(),
        "loss_inv_src": inv["src"],
        "loss_inv_tgt": inv["tgt"],
    }
    return total, breakdown


# self-training ------------------------------------------------------------------------


def pseudolabel(teacher: SegNetParams, tgt_images: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Teacher argmax labels and, per image, the fraction of pixels with confidence ≥ tau.

    Accepts one 3×H×W image (returns H×W labels and a scalar q) or an N-stack.
    """
    single = np.ndim(tgt_images) == 3
    x = np.asarray(tgt_images)[None] if single else np.asarray(tgt_images)
    dtype = teacher["enc1.w"].dtype
    probs = softmax_channels(segnet.forward(teacher, Tensor(x.astype(dtype)))).data
    labels = np.argmax(probs, axis=1).astype(np.uint8)
    q = (probs.max(axis=1) >= tau).mean(axis=(1, 2))
    if single:
        return labels[0], float(q[0])
    return labels, q


def dacs_mask(src_labels: np.ndarray, seed: int) -> np.ndarray:
    """Boolean mask of ⌈K/2⌉ randomly chosen classes among the K present in ``src_labels``."""
    rng = np.random.default_rng(seed)
    classes = np.unique(src_labels)
    classes = classes[classes != IGNORE]
    chosen = rng.choice(classes, size=math.ceil(len(classes) / 2), replace=False)
    return np.isin(src_labels, chosen)


def apply_mix(mask: np.ndarray, src: tuple, tgt: tuple) -> tuple[np.ndarray, np.ndarray]:
    (src_img, src_lab), (tgt_img, tgt_lab) = src, tgt
    if src_img.shape != tgt_img.shape or src_lab.shape != tgt_lab.shape:
        raise BatchError("source and target pair differ in shape")
    image = np.where(mask[None], src_img, tgt_img)
    labels = np.where(mask, src_lab, tgt_lab).astype(np.uint8)
    return image, labels


def dacs_mix(src: tuple, tgt: tuple, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Paste a random half of the source classes (pixels and labels) onto the target."""
    return apply_mix(dacs_mask(src[1], seed), src, tgt)


def ema_update(teacher: SegNetParams, student: SegNetParams, alpha: float) -> SegNetParams:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"EMA alpha must lie in [0, 1], got {alpha}")
    out = {}
    for name in teacher.names():
        t, s = teacher[name].data, student[name].data
        if t.shape != s.shape:
            raise ShapeError(f"{name}: teacher {t.shape} vs student {s.shape}")
        out[name] = Tensor((alpha * t + (1.0 - alpha) * s).astype(t.dtype))
    return SegNetParams(out)


# optimizer ---------------------------------------------------------------------------


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: SegNetParams) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(t.data) for k, t in params.tensors.items()},
            {k: np.zeros_like(t.data) for k, t in params.tensors.items()},
        )


def adamw_step(
    params: SegNetParams,
    opt: AdamState,
    grads: dict[str, np.ndarray],
    lr_encoder: float,
    lr_decoder: float,
    betas: tuple[float, float] = (0.9, 0.999),
    wd: float = 0.01,
    eps: float = 1e-8,
) -> tuple[SegNetParams, AdamState]:
    """One AdamW update with decoupled weight decay and bias correction."""
    if lr_encoder < 0 or lr_decoder < 0:
        raise ValueError("learning rates must be non-negative")
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = int((~np.isfinite(g)).sum())
            raise NonFiniteError(f"gradient of {name} has {bad} non-finite entries at step {opt.step + 1}")
    b1, b2 = betas
    t = opt.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, tensor in params.tensors.items():
        p = tensor.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        lr = lr_encoder if params.is_encoder(name) else lr_decoder
        m = b1 * opt.m[name] + (1 - b1) * g
        v = b2 * opt.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[name] = Tensor(p.astype(tensor.dtype), requires_grad=tensor.requires_grad)
        new_m[name] = m.astype(opt.m[name].dtype)
        new_v[name] = v.astype(opt.v[name].dtype)
    return SegNetParams(new_params), AdamState(t, new_m, new_v)


# training ----------------------------------------------------------------------------

STREAM_DATA, STREAM_INIT, STREAM_DACS, STREAM_JITTER = 1, 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = field(default_factory=LossConfig)
    iterations: int = 2000
    batch_size: int = 2
    lr_encoder: float = 1e-3
    lr_decoder: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    warmup_frac: float = 0.1
    lr_poly_power: float = 1.0
    ema_alpha: float = 0.999
    tau: float = 0.968
    dacs_prob: float = 0.5
    dtype: str = "float32"

    def lr_at(self, it: int, base: float) -> float:
        """Linear warm-up then polynomial decay; ``it`` counts from 0."""
        warm = max(1, int(round(self.warmup_frac * self.iterations)))
        if it < warm:
            return base * (it + 1) / warm
        if self.lr_poly_power == 0:
            return base
        return base * (1.0 - (it - warm) / max(1, self.iterations - warm)) ** self.lr_poly_power


@dataclass
class TrainState:
    student: SegNetParams
    teacher: SegNetParams
    opt: AdamState
    iteration: int
    rngs: dict[str, np.random.Generator]


def init_state(run_seed: int, dtype=np.float32) -> TrainState:
    student = segnet.init_params(derive_seed(run_seed, 0, STREAM_INIT), dtype=dtype)
    teacher = student.copy(requires_grad=False)
    rngs = {
        name: np.random.default_rng(derive_seed(run_seed, 0, stream))
        for name, stream in (("data", STREAM_DATA), ("dacs", STREAM_DACS), ("jitter", STREAM_JITTER))
    }
    return TrainState(student, teacher, AdamState.zeros_like(student), 0, rngs)


def build_batch(state: TrainState, src_images, src_labels, tgt_images, cfg: TrainConfig) -> TrainBatch:
    """Stylize both directions, pseudolabel the target and maybe apply DACS mixing."""
    style = cfg.loss.style
    b = len(src_images)
    jit = state.rngs["jitter"].integers(0, 2**63, size=(b, 2))
    if style.method == "fda":
        st, ts = fda_pair(src_images, tgt_images, style.beta)
    else:
        st = np.stack([stylize(src_images[i], tgt_images[i], style, seed=int(jit[i, 0])) for i in range(b)])
        ts = np.stack([stylize(tgt_images[i], src_images[i], style, seed=int(jit[i, 1])) for i in range(b)])
    pseudo, q = pseudolabel(state.teacher, tgt_images, cfg.tau)
    batch = TrainBatch(src_images, src_labels, tgt_images, st, ts, pseudo, q)

    coins = state.rngs["dacs"].random(b)
    mix_seeds = state.rngs["dacs"].integers(0, 2**63, size=b)
    if np.any(coins < cfg.dacs_prob):
        mix_img, mix_lab, mix_w = [], [], []
        for i in range(b):
            if coins[i] < cfg.dacs_prob:
                mask = dacs_mask(src_labels[i], int(mix_seeds[i]))
            else:
                mask = np.zeros(src_labels[i].shape, dtype=bool)
            img, lab = apply_mix(mask, (src_images[i], src_labels[i]), (tgt_images[i], pseudo[i]))
            mix_img.append(img)
            mix_lab.append(lab)
            mix_w.append(np.where(mask, 1.0, q[i]))
        batch.mix_images = np.stack(mix_img)
        batch.mix_labels = np.stack(mix_lab)
        batch.mix_weights = np.stack(mix_w)
    return batch


def train_step(state: TrainState, batch_sources: tuple, cfg: TrainConfig) -> tuple[TrainState, dict]:
    src_images, src_labels, tgt_images = batch_sources
    batch = build_batch(state, src_images, src_labels, tgt_images, cfg)

    with Tape() as tape:
        total, row = compose_loss(cfg.loss, batch, state.student)
        for key in ("loss_total", "loss_ce_src", "loss_ce_tgt", "loss_inv_src", "loss_inv_tgt"):
            if not math.isfinite(row[key]):
                raise NonFiniteError(f"{key} is non-finite at iteration {state.iteration + 1}")
        grads_by_uid = tape.backward(total)
    grads = {name: grads_by_uid[t.uid] for name, t in state.student.tensors.items() if t.uid in grads_by_uid}

    it = state.iteration
    lr_e = cfg.lr_at(it, cfg.lr_encoder)
    lr_d = cfg.lr_at(it, cfg.lr_decoder)
    student, opt = adamw_step(state.student, state.opt, grads, lr_e, lr_d, cfg.betas, cfg.weight_decay, cfg.eps)
    alpha = min(1.0 - 1.0 / (it + 2), cfg.ema_alpha)
    teacher = ema_update(state.teacher, student, alpha)

    new_state = TrainState(student, teacher, opt, it + 1, state.rngs)
    row = {"iter": it + 1, **row, "q_weight": float(np.mean(batch.q)), "lr": lr_e}
    return new_state, row


def sample_sources(state: TrainState, src_images, src_labels, tgt_images, batch_size: int) -> tuple:
    rng = state.rngs["data"]
    si = rng.integers(0, len(src_images), size=batch_size)
    ti = rng.integers(0, len(tgt_images), size=batch_size)
    return src_images[si], src_labels[si], tgt_images[ti]


def train(
    cfg: TrainConfig,
    src_images: np.ndarray,
    src_labels: np.ndarray,
    tgt_images: np.ndarray,
    run_seed: int,
    iterations: Optional[int] = None,
    on_row=None,
) -> tuple[TrainState, list[dict]]:
    """Run ``iterations`` (default ``cfg.iterations``) steps from a fresh state."""
    dtype = np.dtype(cfg.dtype)
    state = init_state(run_seed, dtype=dtype)
    n = cfg.iterations if iterations is None else iterations
    src_images = src_images.astype(dtype)
    tgt_images = tgt_images.astype(dtype)
    rows = []
    for _ in range(n):
        sources = sample_sources(state, src_images, src_labels, tgt_images, cfg.batch_size)
        state, row = train_step(state, sources, cfg)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return state, rows


def with_loss(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, loss=replace(cfg.loss, **changes))
