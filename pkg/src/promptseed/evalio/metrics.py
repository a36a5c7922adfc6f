from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np


@dataclass
class IoUReport:
    per_class_iou: dict[int, float]
    mean_iou: float
    confusion: np.ndarray

    def to_dict(self, class_names: dict[int, str] | None = None) -> dict:
        names = class_names or {}
        return {
            "per_class": {names.get(c, str(c)): v for c, v in self.per_class_iou.items()},
            "mean_iou": self.mean_iou,
        }


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns prediction."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth sizes differ")
    for name, a in (("prediction", pred), ("ground truth", gt)):
        if a.size and (a.min() < 0 or a.max() >= num_classes):
            raise ValueError(f"{name} has labels outside [0, {num_classes})")
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(preds: Iterable, gts: Iterable, num_classes: int) -> IoUReport:
    """Dataset-level IoU from an accumulated confusion matrix.

    ``num_classes`` counts background. Classes absent from both prediction
    and ground truth do not enter the mean.
    """
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    preds, gts = list(preds), list(gts)
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth maps")
    for p, g in zip(preds, gts):
        p = getattr(p, "labels", p)
        g = getattr(g, "labels", g)
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")
        conf += confusion_matrix(p, g, num_classes)
    tp = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - tp
    per_class = {c: float(tp[c] / union[c]) for c in range(num_classes) if union[c] > 0}
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return IoUReport(per_class, mean, conf)
