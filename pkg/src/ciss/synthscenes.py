"""Procedural two-domain toy street scenes.

Geometry (horizon, shapes, their colors and textures) is a pure function of the
scene seed; the domain only changes how the scene is rendered. Object classes are
told apart by shape and texture, never by color, which is drawn per instance.
"source" is a clean day rendering; "target" is a low-contrast, dark, blue-cast
night rendering with a smooth glow band and stronger sensor noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .netpbm import dequantize, quantize, read_pgm, read_ppm, write_pgm, write_ppm

CLASSES = ("sky", "ground", "disk", "box", "wedge")
NUM_CLASSES = len(CLASSES)
IGNORE = 255
SIZE = 64
DOMAINS = ("source", "target")
SPLITS = ("src_train", "tgt_train", "tgt_val")
SPLIT_DOMAIN = {"src_train": "source", "tgt_train": "target", "tgt_val": "target"}

SKY_COLOR = np.array([0.55, 0.75, 0.95])
GROUND_COLOR = np.array([0.50, 0.50, 0.46])
TEXTURE_PERIOD = 5.0  # pixels per stripe pair
TEXTURE_DEPTH = 0.2
GROUND_TEXTURE_DEPTH = 0.12
DAY_NOISE = 0.02
NIGHT_CONTRAST = 0.7
NIGHT_CAST = np.array([-0.30, -0.22, -0.05])
NIGHT_GLOW = 0.15
NIGHT_NOISE = 0.04

_MASK64 = (1 << 64) - 1


class LabelAccessError(PermissionError):
    """Raised when code asks for labels of unlabeled target-train scenes."""


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, index: int, stream: int = 0) -> int:
    """Order-independent per-item seed; ``stream`` separates named sub-streams."""
    return splitmix64(splitmix64(splitmix64(master_seed & _MASK64) ^ (stream & _MASK64)) ^ (index & _MASK64))


@dataclass
class Scene:
    image: np.ndarray  # 3×64×64 float in [0,1]
    labels: np.ndarray  # 64×64 uint8
    domain: str
    seed: int


def _layout(rng: np.random.Generator):
    """Horizon row plus a list of (class, params, color) shape instances."""
    horizon = int(rng.integers(18, 41))
    n = int(rng.integers(2, 6))
    shapes = []
    for _ in range(n):
        cls = int(rng.integers(2, 5))
        cy = float(rng.uniform(8, SIZE - 8))
        cx = float(rng.uniform(8, SIZE - 8))
        r = float(rng.uniform(6, 14))
        extra = float(rng.uniform(0.6, 1.4))
        color = rng.uniform(0.3, 0.9, size=3)
        shapes.append((cls, cy, cx, r, extra, color))
    sky_color = np.clip(SKY_COLOR + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
    ground_color = np.clip(GROUND_COLOR + rng.uniform(-0.06, 0.06, size=3), 0.0, 1.0)
    return horizon, shapes, sky_color, ground_color


def _shape_mask(cls, cy, cx, r, extra, yy, xx):
    if cls == 2:  # disk
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if cls == 3:  # axis-aligned box, aspect from ``extra``
        return (np.abs(yy - cy) <= r * extra) & (np.abs(xx - cx) <= r / extra)
    # wedge: upward triangle with apex at (cy - r, cx)
    top = cy - r
    height = 2 * r
    half = r * extra
    t = (yy - top) / height
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half * t)


def _square_wave(t):
    return np.sign(np.sin(t * (2 * np.pi / TEXTURE_PERIOD)))


def _texture(cls, yy, xx):
    if cls == 2:  # disk: horizontal stripes
        return _square_wave(yy)
    if cls == 3:  # box: vertical stripes
        return _square_wave(xx)
    return _square_wave(xx) * _square_wave(yy)  # wedge: checker


def _render_clean(seed: int):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(np.float64)
    for _attempt in range(32):
        horizon, shapes, sky_color, ground_color = _layout(rng)
        sky = yy < horizon
        labels = np.where(sky, 0, 1).astype(np.uint8)
        ground = ground_color[:, None, None] * (0.8 + 0.3 * yy / SIZE)
        ground = ground * (1.0 + GROUND_TEXTURE_DEPTH * np.sign(np.sin((xx + yy) * np.pi / 2.0)))
        image = np.where(sky, sky_color[:, None, None] * (1.0 - 0.25 * yy / SIZE), ground)
        for cls, cy, cx, r, extra, color in shapes:
            m = _shape_mask(cls, cy, cx, r, extra, yy, xx)
            labels[m] = cls
            image[:, m] = color[:, None] * (1.0 + TEXTURE_DEPTH * _texture(cls, yy, xx)[m])
        if len(np.unique(labels)) >= 3:
            return np.clip(image, 0.0, 1.0), labels
    raise RuntimeError(f"seed {seed}: could not lay out a scene with 3 classes")


def _night(clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Lower contrast, a bluish-dark per-channel cast, one smooth glow band and more noise."""
    yy, xx = np.mgrid[0:SIZE, 0:SIZE] / SIZE
    angle = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(0.5, 1.0)
    phase = rng.uniform(0, 2 * np.pi)
    glow = NIGHT_GLOW * np.cos(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
    cast = NIGHT_CAST + rng.uniform(-0.05, 0.05, size=3)
    img = NIGHT_CONTRAST * clean + cast[:, None, None] + glow
    return img + rng.normal(0.0, NIGHT_NOISE, size=clean.shape)


def gen_scene(seed: int, domain: str) -> Scene:
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}, got {domain!r}")
    clean, labels = _render_clean(seed)
    # rendering noise has its own stream so labels cannot depend on the domain
    style_rng = np.random.default_rng(derive_seed(seed, DOMAINS.index(domain), stream=7))
    if domain == "source":
        img = clean + style_rng.normal(0.0, DAY_NOISE, size=clean.shape)
    else:
        img = _night(clean, style_rng)
    return Scene(image=np.clip(img, 0.0, 1.0), labels=labels, domain=domain, seed=seed)


# dataset splits ----------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    split: str
    seed: int
    image_path: str
    label_path: str  # "-" when the labels are withheld


def build_splits(master_seed: int, n_src_train: int, n_tgt_train: int, n_val: int) -> list[ManifestEntry]:
    """Assign disjoint per-sample seeds to the three splits (paths relative to the dataset root)."""
    counts = {"src_train": n_src_train, "tgt_train": n_tgt_train, "tgt_val": n_val}
    for split, n in counts.items():
        if n < 1:
            raise ValueError(f"{split} count must be >= 1, got {n}")
    entries = []
    index = 0
    for split in SPLITS:
        for i in range(counts[split]):
            seed = derive_seed(master_seed, index)
            index += 1
            img = f"images/{split}_{i:05d}.ppm"
            lab = "-" if split == "tgt_train" else f"labels/{split}_{i:05d}.pgm"
            entries.append(ManifestEntry(split, seed, img, lab))
    seeds = [e.seed for e in entries]
    if len(set(seeds)) != len(seeds):
        raise RuntimeError("seed collision in split construction")
    return entries


def write_dataset(root: str | Path, entries: list[ManifestEntry]) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for e in entries:
        scene = gen_scene(e.seed, SPLIT_DOMAIN[e.split])
        write_ppm(root / e.image_path, scene.image)
        if e.label_path != "-":
            write_pgm(root / e.label_path, scene.labels)
    manifest = root / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for e in entries:
            w.writerow([e.split, e.seed, e.image_path, e.label_path])
    return manifest


def read_manifest(path: str | Path) -> list[ManifestEntry]:
    with Path(path).open(newline="") as fh:
        return [ManifestEntry(r[0], int(r[1]), r[2], r[3]) for r in csv.reader(fh) if r]


class SplitData:
    """Images of one split; labels are only handed out for labeled splits."""

    def __init__(self, split: str, seeds: list[int], images: np.ndarray, labels: Optional[np.ndarray]):
        self.split = split
        self.seeds = seeds
        self.images = images
        self._labels = labels

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels(self) -> np.ndarray:
        if self._labels is None:
            raise LabelAccessError(f"labels of split {self.split!r} are not available to the trainer")
        return self._labels


@dataclass
class Dataset:
    src_train: SplitData
    tgt_train: SplitData
    tgt_val: SplitData


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    entries = read_manifest(manifest)
    parts = {}
    for split in SPLITS:
        es = [e for e in entries if e.split == split]
        if not es:
            raise ValueError(f"{manifest}: split {split!r} is empty")
        images = np.stack([read_ppm(root / e.image_path) for e in es])
        labels = None
        if split != "tgt_train":
            labels = np.stack([read_pgm(root / e.label_path) for e in es])
        parts[split] = SplitData(split, [e.seed for e in es], images, labels)
    return Dataset(**parts)


def roundtrip_8bit(image: np.ndarray) -> np.ndarray:
    """Image exactly as it comes back from disk."""
    return dequantize(quantize(image))
