"""Confusion counting and binary change-detection metrics."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

METRIC_COLUMNS = ("recall", "precision", "oa", "f1", "iou")
CSV_HEADER = ("dataset", "split", "method_tag") + METRIC_COLUMNS


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _as_binary(x, name):
    x = np.asarray(x)
    if x.dtype == bool:
        return x
    if not np.all((x == 0) | (x == 1)):
        raise ValueError(f"{name} must be binary (0/1)")
    return x.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    pred = _as_binary(pred, "pred")
    gt = _as_binary(gt, "gt")
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


def metrics_from_counts(c: ConfusionCounts) -> dict[str, float]:
    """Precision, recall, F1, IoU and overall accuracy of the changed class.

    Empty denominators give 0 for precision/recall and for F1/IoU when there is
    no true positive; OA is 0 only for an empty count.
    """
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2.0 / (1.0 / recall + 1.0 / precision) if c.tp else 0.0
    iou = c.tp / (c.tp + c.fn + c.fp) if c.tp else 0.0
    oa = (c.tp + c.tn) / c.total if c.total else 0.0
    return {"precision": precision, "recall": recall, "f1": f1, "iou": iou, "oa": oa}


def pooled_metrics(preds, gts) -> dict[str, float]:
    """Micro-averaged metrics: counts pooled across tiles before taking ratios."""
    total = ConfusionCounts()
    for p, g in zip(preds, gts):
        total = total + confusion(p, g)
    return metrics_from_counts(total)


def per_tile_metrics(preds, gts) -> dict[str, float]:
    rows = [metrics_from_counts(confusion(p, g)) for p, g in zip(preds, gts)]
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def append_metrics_csv(path, dataset: str, split: str, method_tag: str, metrics: dict):
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(CSV_HEADER)
        w.writerow([dataset, split, method_tag] + [repr(float(metrics[k])) for k in METRIC_COLUMNS])
