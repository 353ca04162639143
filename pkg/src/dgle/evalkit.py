"""Segmentation metrics: confusion accumulation, per-class IoU, mIoU.

IoU = TP / (TP + FP + FN), computed per class from an integer confusion
matrix. Pixels whose ground truth is IGNORE are never evaluated. Pixels
whose *prediction* is IGNORE under a labeled ground truth are tallied in a
reserved "unlabeled" column: they are reported, but excluded from IoU.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import IGNORE, LabelMap


@dataclass
class ConfusionMatrix:
    """K x (K+1) integer counts; counts[g][p] = pixels with GT g predicted p.

    The extra final column counts predictions of IGNORE under a labeled GT.
    """

    num_classes: int
    counts: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes + 1), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes + 1):
                raise ValueError(f"counts must be Kx(K+1), got {self.counts.shape}")
            if (self.counts < 0).any():
                raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        """Number of evaluated (non-IGNORE ground truth) pixels."""
        return int(self.counts.sum())

    def unlabeled_pred_count(self) -> int:
        return int(self.counts[:, self.num_classes].sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different K")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, gt: LabelMap, pred: LabelMap) -> ConfusionMatrix:
    """Return a new matrix with the (gt, pred) pair counted in."""
    k = cm.num_classes
    if gt.num_classes != k or pred.num_classes != k:
        raise ValueError("ground truth / prediction K does not match the matrix")
    if gt.data.shape != pred.data.shape:
        raise ValueError(f"shape mismatch: gt {gt.data.shape} vs pred {pred.data.shape}")
    valid = gt.data != IGNORE
    g = gt.data[valid].astype(np.int64)
    p = pred.data[valid].astype(np.int64)
    p[p == IGNORE] = k  # unlabeled-prediction column
    flat = np.bincount(g * (k + 1) + p, minlength=k * (k + 1))
    return ConfusionMatrix(k, cm.counts + flat.reshape(k, k + 1))


def iou(cm: ConfusionMatrix, class_id: int) -> float | None:
    """Per-class IoU, or None when the class is absent from GT and predictions.

    Pixels predicted IGNORE under labeled ground truth (the reserved column)
    count as misses of their ground-truth class, so they enter FN; the
    reserved column itself never gets an IoU entry.
    """
    k = cm.num_classes
    if not 0 <= class_id < k:
        raise ValueError(f"class_id {class_id} out of range for K={k}")
    tp = int(cm.counts[class_id, class_id])
    fp = int(cm.counts[:, class_id].sum()) - tp
    fn = int(cm.counts[class_id, :].sum()) - tp
    denom = tp + fp + fn
    if denom == 0:
        return None
    return tp / denom


def miou(cm: ConfusionMatrix) -> float:
    """Mean over defined per-class IoUs; undefined classes are excluded."""
    vals = [v for c in range(cm.num_classes) if (v := iou(cm, c)) is not None]
    if not vals:
        raise ValueError("mIoU undefined: no class present in GT or predictions")
    return float(np.mean(vals))


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of evaluated pixels predicted correctly (IGNORE preds count as wrong)."""
    if cm.total == 0:
        raise ValueError("accuracy undefined: no evaluated pixels")
    k = cm.num_classes
    return float(np.trace(cm.counts[:, :k])) / cm.total


def seed_quality(gt: LabelMap, seed: LabelMap) -> tuple[float | None, float]:
    """(precision, coverage) of a sparse seed map against ground truth.

    Precision is the accuracy over non-IGNORE seed pixels (None when there are
    none); coverage is the fraction of all pixels that carry a seed label.
    """
    if gt.data.shape != seed.data.shape:
        raise ValueError(f"shape mismatch: gt {gt.data.shape} vs seed {seed.data.shape}")
    labeled = seed.data != IGNORE
    coverage = float(labeled.mean())
    if not labeled.any():
        return None, coverage
    precision = float((seed.data[labeled] == gt.data[labeled]).mean())
    return precision, coverage


def write_report(path: str, cm: ConfusionMatrix, class_names: list[str] | None = None) -> None:
    """CSV report: one row per class (name, IoU) plus a final mIoU row."""
    k = cm.num_classes
    names = class_names if class_names is not None else [f"class_{c}" for c in range(k)]
    if len(names) != k:
        raise ValueError(f"need {k} class names, got {len(names)}")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "iou"])
        for c in range(k):
            v = iou(cm, c)
            writer.writerow([names[c], "" if v is None else f"{v:.6f}"])
        writer.writerow(["mIoU", f"{miou(cm):.6f}"])
