"""Shallow stylization mappings g(content, style).

The output always carries the content (geometry) of the first argument and the
appearance of the second. All outputs are clamped to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.color import hsv2rgb, rgb2hsv

from .fourier import dft2, idft2

METHODS = ("fda", "reinhard", "jitter")


class StyleError(ValueError):
    pass


@dataclass(frozen=True)
class StyleConfig:
    method: str = "fda"
    beta: float = 0.06
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    prob: float = 0.5

    def __post_init__(self):
        if self.method not in METHODS:
            raise StyleError(f"unknown stylization method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.beta <= 1.0:
            raise StyleError(f"beta must lie in [0, 1], got {self.beta}")
        if not 0.0 <= self.prob <= 1.0:
            raise StyleError(f"prob must lie in [0, 1], got {self.prob}")
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise StyleError(f"{name} strength must be >= 0")


def _check_pair(content: np.ndarray, style: np.ndarray) -> None:
    if content.ndim != 3 or content.shape[0] != 3:
        raise StyleError(f"images must be 3×H×W, got {content.shape}")
    if content.shape != style.shape:
        raise StyleError(f"content {content.shape} and style {style.shape} differ in shape")


# FDA -------------------------------------------------------------------------


def lowpass_mask(h: int, w: int, beta: float) -> np.ndarray:
    """Ideal low-pass mask in the unshifted spectrum layout.

    With b = floor(beta·min(h, w)) the four b×b corner blocks are kept, i.e.
    rows u < b or u >= h−b and likewise for columns. b = 0 keeps nothing.
    """
    if not 0.0 <= beta <= 1.0:
        raise StyleError(f"beta must lie in [0, 1], got {beta}")
    b = int(np.floor(beta * min(h, w)))
    u = np.arange(h)
    v = np.arange(w)
    du = (u < b) | (u >= h - b)
    dv = (v < b) | (v >= w - b)
    return (du[:, None] & dv[None, :]).astype(np.float64)


def _float(x: np.ndarray) -> np.ndarray:
    return x if x.dtype in (np.float32, np.float64) else x.astype(np.float64)


def _swap_low_band(bins_content, bins_style, mask) -> np.ndarray:
    """Content spectrum with the masked bins' amplitude taken from the style.

    amp_style·exp(i·phase_content) equals bins_content·amp_style/amp_content, so
    only the masked bins are touched; a zero content bin has phase 0.
    """
    sel = mask.astype(bool)
    out = bins_content.copy()
    c = bins_content[..., sel]
    amp_c = np.abs(c)
    unit = np.where(amp_c > 0, c / np.where(amp_c > 0, amp_c, 1), 1)
    out[..., sel] = np.abs(bins_style[..., sel]) * unit
    return out


def fda_mix(content: np.ndarray, style: np.ndarray, beta: float) -> np.ndarray:
    """Amplitude-swapped reconstruction before clamping."""
    _check_pair(content, style)
    mask = lowpass_mask(content.shape[-2], content.shape[-1], beta)
    swapped = _swap_low_band(dft2(_float(content)), dft2(_float(style)), mask)
    return idft2(swapped).real


def fda_pair(a: np.ndarray, b: np.ndarray, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """(g(a, b), g(b, a)) for FDA, sharing the two spectra; accepts ...×3×H×W stacks."""
    if a.shape != b.shape or a.shape[-3] != 3:
        raise StyleError(f"FDA pair needs equal ...×3×H×W shapes, got {a.shape} and {b.shape}")
    mask = lowpass_mask(a.shape[-2], a.shape[-1], beta)
    spec = dft2(np.stack([_float(a), _float(b)]))
    mixed = np.stack([_swap_low_band(spec[0], spec[1], mask), _swap_low_band(spec[1], spec[0], mask)])
    out = np.clip(idft2(mixed).real, 0.0, 1.0)
    return out[0], out[1]


def fda_stylize(content: np.ndarray, style: np.ndarray, beta: float) -> np.ndarray:
    return np.clip(fda_mix(content, style, beta), 0.0, 1.0)


# Reinhard ---------------------------------------------------------------------

RGB2LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
LMS2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, 1.0, -2.0],
        [1.0, -1.0, 0.0],
    ]
)
# exact inverses: the 4-digit published inverse is only good to ~7e-3
LMS2RGB = np.linalg.inv(RGB2LMS)
LAB2LMS = np.linalg.inv(LMS2LAB)
_LMS_FLOOR = 1e-6
_STD_FLOOR = 1e-6


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """3×H×W RGB → 3×H×W lαβ (log10 LMS, decorrelated)."""
    lms = np.einsum("ij,jhw->ihw", RGB2LMS, image.astype(np.float64))
    return np.einsum("ij,jhw->ihw", LMS2LAB, np.log10(np.maximum(lms, _LMS_FLOOR)))


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lms = 10.0 ** np.einsum("ij,jhw->ihw", LAB2LMS, lab)
    return np.einsum("ij,jhw->ihw", LMS2RGB, lms)


def reinhard_mix(content: np.ndarray, style: np.ndarray) -> np.ndarray:
    """Per-channel lαβ mean/std matching, before clamping."""
    _check_pair(content, style)
    lc = rgb_to_lab(content)
    ls = rgb_to_lab(style)
    mu_c = lc.mean(axis=(1, 2), keepdims=True)
    mu_s = ls.mean(axis=(1, 2), keepdims=True)
    sd_c = lc.std(axis=(1, 2), keepdims=True)
    sd_s = ls.std(axis=(1, 2), keepdims=True)
    scale = np.where(sd_c < _STD_FLOOR, 1.0, sd_s / np.maximum(sd_c, _STD_FLOOR))
    return lab_to_rgb((lc - mu_c) * scale + mu_s)


def reinhard_transfer(content: np.ndarray, style: np.ndarray) -> np.ndarray:
    return np.clip(reinhard_mix(content, style), 0.0, 1.0)


# color jitter -------------------------------------------------------------------


def _gray(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def apply_jitter(
    image: np.ndarray,
    brightness: float = 1.0,
    contrast: float = 1.0,
    saturation: float = 1.0,
    hue: float = 0.0,
) -> np.ndarray:
    """Apply fixed jitter factors in the order brightness, contrast, saturation, hue.

    ``hue`` is a shift in cycles; the multiplicative factors are neutral at 1.
    """
    out = image.astype(np.float64)
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        out = np.clip(contrast * out + (1.0 - contrast) * _gray(out).mean(), 0.0, 1.0)
    if saturation != 1.0:
        out = np.clip(saturation * out + (1.0 - saturation) * _gray(out)[None], 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb2hsv(np.moveaxis(out, 0, -1))
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = np.clip(np.moveaxis(hsv2rgb(hsv), -1, 0), 0.0, 1.0)
    return out


def draw_jitter(seed: int, config: StyleConfig) -> dict:
    """Sample which perturbations fire and with what factor."""
    rng = np.random.default_rng(seed)
    fire = rng.random(4) < config.prob
    draws = rng.uniform(-1.0, 1.0, size=4)
    factors = {
        "brightness": 1.0 + config.brightness * draws[0],
        "contrast": 1.0 + config.contrast * draws[1],
        "saturation": 1.0 + config.saturation * draws[2],
        "hue": config.hue * draws[3],
    }
    neutral = {"brightness": 1.0, "contrast": 1.0, "saturation": 1.0, "hue": 0.0}
    return {k: (v if f else neutral[k]) for (k, v), f in zip(factors.items(), fire)}


def color_jitter(image: np.ndarray, seed: int, config: StyleConfig) -> np.ndarray:
    return apply_jitter(image, **draw_jitter(seed, config))


# dispatch -------------------------------------------------------------------------


def stylize(content: np.ndarray, style: np.ndarray, config: StyleConfig, seed: int = 0) -> np.ndarray:
    """g(content, style) for the configured method. Jitter ignores ``style``."""
    if config.method == "fda":
        return fda_stylize(content, style, config.beta)
    if config.method == "reinhard":
        return reinhard_transfer(content, style)
    return color_jitter(content, seed, config)
