"""Two-dimensional discrete Fourier transform.

Power-of-two extents go through a vectorized radix-2 Cooley–Tukey transform;
any other extent falls back to a dense O(N²) DFT matrix product. The forward
transform is unnormalized and the inverse applies 1/(H·W). Single-precision
inputs are transformed in complex64, everything else in complex128.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@lru_cache(maxsize=None)
def dft_matrix(n: int, inverse: bool = False) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


@lru_cache(maxsize=None)
def _twiddle(rows: int, inverse: bool) -> np.ndarray:
    sign = 1.0 if inverse else -1.0
    return np.exp(sign * 1j * np.pi * np.arange(rows) / rows)[:, None]


_BASE = 8


def _fft_last(x: np.ndarray, inverse: bool) -> np.ndarray:
    """Unnormalized 1D transform along the last axis.

    Radix-2 decimation in time: x is viewed as (base, n/base) so each column is
    a stride-(n/base) subsequence; columns get a dense base-size DFT, then every
    butterfly stage merges column pairs and doubles the row count.
    """
    n = x.shape[-1]
    ctype = np.complex64 if x.dtype in (np.float32, np.complex64) else np.complex128
    if not _is_pow2(n):
        return x @ dft_matrix(n, inverse).T.astype(ctype)
    lead = x.shape[:-1]
    base = min(n, _BASE)
    a = dft_matrix(base, inverse).astype(ctype) @ x.reshape(*lead, base, n // base)
    while a.shape[-2] < n:
        half = a.shape[-1] // 2
        even = a[..., :half]
        odd = a[..., half:] * _twiddle(a.shape[-2], inverse).astype(ctype)
        a = np.concatenate([even + odd, even - odd], axis=-2)
    return a.reshape(*lead, n)


def dft2(x: np.ndarray) -> np.ndarray:
    """Unnormalized 2D DFT over the last two axes."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ValueError(f"dft2 needs at least 2 dims, got shape {x.shape}")
    rows = _fft_last(x, inverse=False)
    return np.swapaxes(_fft_last(np.swapaxes(rows, -1, -2), inverse=False), -1, -2)


def idft2(spec: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft2`, including the 1/(H·W) factor. Returns complex."""
    spec = np.asarray(spec)
    h, w = spec.shape[-2:]
    rows = _fft_last(spec, inverse=True)
    out = np.swapaxes(_fft_last(np.swapaxes(rows, -1, -2), inverse=True), -1, -2)
    return out / (h * w)


def naive_dft2(x: np.ndarray) -> np.ndarray:
    """Direct dense-matrix 2D DFT; used as an independent reference."""
    x = np.asarray(x, dtype=np.complex128)
    h, w = x.shape[-2:]
    return dft_matrix(h) @ x @ dft_matrix(w).T


class Spectrum:
    """Per-channel 2D spectra of a C×H×W image."""

    def __init__(self, bins: np.ndarray):
        self.bins = bins

    @classmethod
    def of(cls, image: np.ndarray) -> "Spectrum":
        return cls(dft2(image))

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.bins)

    @property
    def phase(self) -> np.ndarray:
        return np.angle(self.bins)

    @classmethod
    def from_polar(cls, amplitude: np.ndarray, phase: np.ndarray) -> "Spectrum":
        return cls(amplitude * np.exp(1j * phase).astype(np.result_type(amplitude.dtype, np.complex64)))

    def inverse(self) -> np.ndarray:
        return idft2(self.bins).real
