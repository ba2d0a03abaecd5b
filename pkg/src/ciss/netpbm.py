"""Binary PPM (P6) images and PGM (P5) label maps, 8-bit."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def quantize(image: np.ndarray) -> np.ndarray:
    """[0,1] floats → uint8 with round-half-up (0↔0, 255↔1)."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def _read(path: Path, magic: bytes):
    blob = Path(path).read_bytes()
    m = _HEADER.match(blob)
    if not m or m.group(1) != magic:
        raise NetpbmError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise NetpbmError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    body = blob[m.end() :]
    if len(body) != w * h * channels:
        raise NetpbmError(f"{path}: expected {w * h * channels} bytes of pixels, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    """Write a 3×H×W float image in [0,1]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise NetpbmError(f"PPM image must be 3×H×W, got {image.shape}")
    raw = np.moveaxis(quantize(image), 0, -1)
    h, w = raw.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + raw.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a P6 file as a 3×H×W float64 image."""
    return np.moveaxis(dequantize(_read(path, b"P6")), -1, 0).copy()


def read_ppm_bytes(path: str | Path) -> np.ndarray:
    return np.moveaxis(_read(path, b"P6"), -1, 0).copy()


def write_pgm(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise NetpbmError(f"PGM label map must be H×W, got {labels.shape}")
    if labels.min() < 0 or labels.max() > 255:
        raise NetpbmError("label values must fit in 8 bits")
    h, w = labels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + labels.astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    return _read(path, b"P5")[..., 0].copy()
