"""Dense arrays with a reverse-mode differentiation tape.

Operations only record onto a :class:`Tape` when one is active (``with Tape():``)
and at least one input requires a gradient. Outside a tape every op is a plain
numpy forward pass, which is how teacher inference stays gradient-free.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "NonFiniteError",
    "ShapeError",
    "ConfigError",
    "backward",
    "conv2d",
    "relu",
    "softmax_channels",
    "upsample_bilinear",
    "log",
    "clamp_min",
    "square",
    "absolute",
    "stack",
    "concat",
]


class TapeError(RuntimeError):
    """Misuse of the differentiation tape (non-scalar root, detached root, reuse)."""


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


_uid = itertools.count()
_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("uid", "parents", "backward_fn", "op")

    def __init__(self, uid, parents, backward_fn, op):
        self.uid = uid
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of differentiable ops.

    Nodes are appended as ops execute, so the list is already in topological
    order. ``grads`` maps leaf uid to its accumulated gradient after
    :meth:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[int, np.ndarray] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.grads.clear()
        self._consumed = False

    def record(self, out: "Tensor", parents: tuple, backward_fn: Callable, op: str) -> None:
        self.nodes.append(_Node(out.uid, parents, backward_fn, op))
        out._tape = self

    def backward(self, root: "Tensor") -> dict[int, np.ndarray]:
        if root.data.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
        if root._tape is not self:
            raise TapeError("root was not produced on this tape (detached root)")
        if self._consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        self._consumed = True

        pending: dict[int, np.ndarray] = {root.uid: np.ones_like(root.data)}
        leaves: dict[int, "Tensor"] = {}
        for node in reversed(self.nodes):
            g = pending.pop(node.uid, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is None:
                    leaves[parent.uid] = parent
                    acc = self.grads
                else:
                    acc = pending
                prev = acc.get(parent.uid)
                acc[parent.uid] = pg if prev is None else prev + pg
        for uid, leaf in leaves.items():
            g = self.grads[uid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return self.grads


def backward(root: "Tensor") -> dict[int, np.ndarray]:
    """Run reverse-mode accumulation from a scalar ``root`` on its own tape."""
    if root._tape is None:
        raise TapeError("root is detached: it was not computed under an active tape")
    return root._tape.backward(root)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "uid", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.uid = next(_uid)
        self._tape: Optional[Tape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return _add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_wrap(other, self.dtype))

    def __rsub__(self, other):
        return _add(_wrap(other, self.dtype), -self)

    def __neg__(self):
        return _make(-self.data, (self,), lambda g: (-g,), "neg")

    def __mul__(self, other):
        return _mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; divide by a constant")
        return _mul(self, _wrap(1.0 / other, self.dtype))

    def __getitem__(self, idx):
        out = self.data[idx]
        shape, dtype = self.shape, self.dtype

        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return _make(np.array(out), (self,), bw, "getitem")

    def sum(self, axis=None):
        shape = self.shape

        def bw(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _make(np.asarray(self.data.sum(axis=axis)), (self,), bw, "sum")

    def mean(self, axis=None):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape):
        orig = self.shape
        return _make(self.data.reshape(*shape), (self,), lambda g: (g.reshape(orig),), "reshape")


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * xd * g,), "square")


def absolute(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (np.sign(xd) * g,), "abs")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make(out, (x,), lambda g: (g / xd,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient is zero where the floor is active."""
    xd = x.data
    keep = xd >= floor
    return _make(np.maximum(xd, floor), (x,), lambda g: (g * keep,), "clamp_min")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    on = xd > 0
    return _make(xd * on, (x,), lambda g: (g * on,), "relu")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over the channel axis of a C×H×W (or N×C×H×W) tensor."""
    if logits.ndim not in (3, 4):
        raise ShapeError(f"softmax_channels expects C×H×W or N×C×H×W, got {logits.shape}")
    axis = logits.ndim - 3
    if logits.shape[axis] < 2:
        raise ShapeError("softmax_channels needs at least 2 channels")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (logits,), bw, "softmax")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a C_in×H×W (or N×C_in×H×W) input with a square odd kernel.

    Output extent is floor((H + 2·pad − k) / stride) + 1.
    """
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be C_out×C_in×k×k, got {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"kernel must be square with odd size, got {kh}×{kw}")
    if stride < 1 or pad < 0:
        raise ConfigError(f"need stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias must have shape ({c_out},), got {bias.shape}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise ShapeError(f"input must be C×H×W or N×C×H×W, got {x.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    if c != c_in:
        raise ShapeError(f"input has {c} channels but kernel expects {c_in}")
    k = kh
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"input {h}×{w} with pad {pad} is smaller than kernel {k}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    # channels-last internally: window extraction and the gradient scatter then
    # copy contiguous C-length runs instead of striding across planes
    xh = xd.transpose(0, 2, 3, 1)
    xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xh
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * c)
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(c_out, k * k * c)
    out = cols @ wmat.T
    out += bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def bw(g):
        g2 = (g if batched else g[None]).transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = None
        if kernel.requires_grad:
            gk = np.ascontiguousarray((g2.T @ cols).reshape(c_out, k, k, c).transpose(0, 3, 1, 2))
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, k, k, c)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, :, i, j]
            gx = gxp[:, pad : pad + h, pad : pad + w].transpose(0, 3, 1, 2)
            if not batched:
                gx = gx[0]
            gx = np.ascontiguousarray(gx)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), bw, "conv2d")


_UPSAMPLE_FACTORS = (2, 4)


def _interp_matrix(n: int, factor: int, dtype) -> np.ndarray:
    """(n·factor)×n linear interpolation map, align-corners-false."""
    m = np.zeros((n * factor, n), dtype=dtype)
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    if factor not in _UPSAMPLE_FACTORS:
        raise ConfigError(f"upsample factor must be one of {_UPSAMPLE_FACTORS}, got {factor}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"upsample expects C×h×w or N×C×h×w, got {x.shape}")
    h, w = x.shape[-2:]
    mh = _interp_matrix(h, factor, x.dtype)
    mw = _interp_matrix(w, factor, x.dtype)
    out = mh @ x.data @ mw.T
    return _make(out, (x,), lambda g: (mh.T @ g @ mw,), "upsample")
