"""Confusion-matrix accumulation and mean intersection-over-union."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

from .data import IGNORE_INDEX


class ConfusionMatrix:
    """Pixel counts indexed [ground truth, prediction]; ignore pixels excluded."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
        c = self.num_classes
        if pred.size and int(pred.max(initial=0)) >= c:
            raise ValueError(f"prediction contains class ids >= {c}")
        valid = gt != IGNORE_INDEX
        if valid.any() and int(gt[valid].max()) >= c:
            raise ValueError(f"ground truth contains class ids >= {c} besides the ignore value")
        idx = gt[valid].astype(np.int64) * c + pred[valid].astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        merged = ConfusionMatrix(self.num_classes)
        merged.counts = self.counts + other.counts
        return merged

    @property
    def total_pixels(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class IoUReport:
    per_class: Dict[int, float]  # only classes with nonzero union appear
    mean: float


def mean_iou(cm: ConfusionMatrix, class_subset: Optional[Iterable[int]] = None) -> IoUReport:
    """Mean IoU over the subset; zero-union classes are left out of the mean."""
    c = cm.num_classes
    subset = sorted(set(range(c) if class_subset is None else (int(k) for k in class_subset)))
    if not subset:
        raise ValueError("class subset is empty")
    if subset[0] < 0 or subset[-1] >= c:
        raise ValueError(f"class subset {subset} out of range for {c} classes")
    diag = np.diag(cm.counts)
    union = cm.counts.sum(axis=0) + cm.counts.sum(axis=1) - diag
    per_class = {k: float(diag[k] / union[k]) for k in subset if union[k] > 0}
    if not per_class:
        raise ValueError("no class in the subset has any predicted or ground-truth pixels")
    return IoUReport(per_class=per_class, mean=float(np.mean(list(per_class.values()))))
