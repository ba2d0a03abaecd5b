"""Micro encoder/decoder segmentation network and its checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, relu, upsample_bilinear

NUM_CLASSES = 5
FEATURE_SHAPE = (64, 16, 16)
IMAGE_SHAPE = (3, 64, 64)

# name, c_out, c_in, k, stride, pad
ENCODER_LAYERS = (
    ("enc1", 16, 3, 3, 2, 1),
    ("enc2", 32, 16, 3, 2, 1),
    ("enc3", 64, 32, 3, 1, 1),
)
DECODER_LAYERS = (
    ("dec1", 32, 64, 3, 1, 1),
    ("dec2", NUM_CLASSES, 32, 1, 1, 0),
)
UPSAMPLE = 4

CKPT_MAGIC = b"CISSCKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class SegNetParams:
    """Weights of F = decoder ∘ encoder, keyed ``<layer>.w`` / ``<layer>.b``."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def is_encoder(self, name: str) -> bool:
        return name.startswith("enc")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self, requires_grad: bool | None = None) -> "SegNetParams":
        return SegNetParams(
            {
                k: Tensor(
                    t.data.copy(),
                    requires_grad=t.requires_grad if requires_grad is None else requires_grad,
                )
                for k, t in self.tensors.items()
            }
        )

    def astype(self, dtype) -> "SegNetParams":
        return SegNetParams(
            {k: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad) for k, t in self.tensors.items()}
        )

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def init_params(seed: int, dtype=np.float64, requires_grad: bool = True) -> SegNetParams:
    """He fan-in normal weights, zero biases; deterministic given ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, c_out, c_in, k, _, _ in ENCODER_LAYERS + DECODER_LAYERS:
        fan_in = c_in * k * k
        w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / fan_in)
        tensors[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=requires_grad)
        tensors[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=requires_grad)
    return SegNetParams(tensors)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def encode(params: SegNetParams, image) -> Tensor:
    """Bottleneck features (post-ReLU) for one 3×H×W image or an N×3×H×W batch."""
    x = _as_tensor(image, params["enc1.w"].dtype)
    if x.ndim not in (3, 4) or x.shape[-3] != 3:
        raise ShapeError(f"encode expects 3×H×W or N×3×H×W input, got {x.shape}")
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ShapeError(f"spatial extent must be divisible by 4, got {x.shape[-2:]}")
    for name, _, _, _, stride, pad in ENCODER_LAYERS:
        x = relu(conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride=stride, pad=pad))
    return x


def decode(params: SegNetParams, features: Tensor) -> Tensor:
    """Full-resolution class logits from bottleneck features."""
    d = ENCODER_LAYERS[-1][1]
    if features.ndim not in (3, 4) or features.shape[-3] != d:
        raise ShapeError(f"decode expects {d}×M×N features, got {features.shape}")
    (n1, _, _, _, s1, p1), (n2, _, _, _, s2, p2) = DECODER_LAYERS
    x = relu(conv2d(features, params[f"{n1}.w"], params[f"{n1}.b"], stride=s1, pad=p1))
    x = conv2d(x, params[f"{n2}.w"], params[f"{n2}.b"], stride=s2, pad=p2)
    return upsample_bilinear(x, UPSAMPLE)


def forward(params: SegNetParams, image) -> Tensor:
    return decode(params, encode(params, image))


def predict(params: SegNetParams, images: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Argmax label maps (uint8) for an N×3×H×W stack, no tape involved."""
    out = []
    dtype = params["enc1.w"].dtype
    for i in range(0, len(images), chunk):
        logits = forward(params, Tensor(np.asarray(images[i : i + chunk], dtype=dtype))).data
        out.append(np.argmax(logits, axis=1).astype(np.uint8))
    return np.concatenate(out)


# checkpoint ----------------------------------------------------------------


def write_checkpoint(path: str | Path, records: Iterable[tuple[str, np.ndarray]]) -> None:
    """Write named arrays as little-endian float32 records behind the CISSCKPT header."""
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<I", CKPT_VERSION)
    for name, arr in records:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = data.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return out


def params_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "", requires_grad: bool = False) -> SegNetParams:
    template = init_params(0)
    tensors = {}
    for name in template.names():
        key = prefix + name
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        arr = arrays[key]
        if arr.shape != template[name].shape:
            raise CheckpointError(f"{key}: shape {arr.shape}, expected {template[name].shape}")
        tensors[name] = Tensor(arr.copy(), requires_grad=requires_grad)
    return SegNetParams(tensors)
