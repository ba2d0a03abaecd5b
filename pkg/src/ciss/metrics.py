"""Confusion matrix, per-class IoU, mean IoU and pixel accuracy."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

IGNORE = 255


class MetricError(ValueError):
    pass


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def confusion_update(cm: np.ndarray, pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Return ``cm`` plus counts for one prediction; rows are truth, cols prediction."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise MetricError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    c = cm.shape[0]
    keep = truth != IGNORE
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= c or t.min() < 0):
        raise MetricError(f"truth class id out of range [0, {c})")
    if p.size and (p.max() >= c or p.min() < 0):
        raise MetricError(f"predicted class id out of range [0, {c})")
    return cm + np.bincount(t * c + p, minlength=c * c).reshape(c, c)


def iou_per_class(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both truth and prediction."""
    if cm.sum() == 0:
        raise MetricError("confusion matrix is empty; metrics are undefined")
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(axis=0) + cm.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)


def miou(cm: np.ndarray) -> float:
    return float(np.nanmean(iou_per_class(cm)))


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise MetricError("confusion matrix is empty; metrics are undefined")
    return float(np.trace(cm) / total)


def write_report(path: str | Path, cm: np.ndarray, class_names: Sequence[str]) -> None:
    """CSV of ``class,id,iou`` rows followed by ``miou`` and ``pixel_acc`` rows."""
    ious = iou_per_class(cm)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "id", "iou"])
        for i, (name, v) in enumerate(zip(class_names, ious)):
            w.writerow([name, i, "nan" if np.isnan(v) else repr(float(v))])
        w.writerow(["miou", "", repr(miou(cm))])
        w.writerow(["pixel_acc", "", repr(pixel_accuracy(cm))])


def read_report(path: str | Path) -> dict:
    out = {"iou": {}}
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    for name, idx, val in rows[1:]:
        if name in ("miou", "pixel_acc"):
            out[name] = float(val)
        else:
            out["iou"][name] = float(val)
    return out
