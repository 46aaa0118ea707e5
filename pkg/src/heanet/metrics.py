"""Overall accuracy, category mIoU and instance mIoU.

A class that is absent from both the prediction and the ground truth has an
undefined IoU (0/0); it is counted as 1, the usual part-segmentation
convention.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .exceptions import DataError


def _labels(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.dtype.kind not in "iu":
        if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
            raise DataError(f"{name} must be integer labels")
        arr = arr.astype(np.int64)
    return arr.ravel()


def accuracy(pred, truth) -> float:
    p, t = _labels(pred, "pred"), _labels(truth, "truth")
    if p.shape != t.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    if p.size == 0:
        raise DataError("accuracy needs at least one label")
    return float(np.mean(p == t))


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_labels(cls, pred, truth, num_classes: int) -> "ConfusionCounts":
        p, t = _labels(pred, "pred"), _labels(truth, "truth")
        if p.shape != t.shape:
            raise DataError(f"length mismatch: {p.size} predictions vs {t.size} labels")
        for arr, name in ((p, "pred"), (t, "truth")):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise DataError(f"{name} labels must lie in [0, {num_classes})")
        pred_count = np.bincount(p, minlength=num_classes)
        true_count = np.bincount(t, minlength=num_classes)
        tp = np.bincount(t[p == t], minlength=num_classes)
        return cls(tp, pred_count - tp, true_count - tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def num_classes(self) -> int:
        return self.tp.size

    def iou(self, absent: float = 1.0) -> np.ndarray:
        denom = self.tp + self.fp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, self.tp / np.maximum(denom, 1), absent)

    def recall(self) -> np.ndarray:
        support = self.tp + self.fn
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(support > 0, self.tp / np.maximum(support, 1), 0.0)

    def accuracy(self) -> float:
        total = (self.tp + self.fn).sum()
        if total == 0:
            raise DataError("no labels counted")
        return float(self.tp.sum() / total)


def cat_miou(pred, truth, num_classes: int) -> float:
    """Mean over classes of TP / (TP + FP + FN)."""
    return float(ConfusionCounts.from_labels(pred, truth, num_classes).iou().mean())


def instance_iou(pred, truth, parts, literal: bool = False) -> float:
    """IoU of one instance.

    Args:
        parts: The part ids valid for this instance (an int ``n`` means
            ``range(n)``).
        literal: Use a single pooled ratio over all points instead of the
            mean of per-part IoUs.
    """
    p, t = _labels(pred, "pred"), _labels(truth, "truth")
    if p.shape != t.shape:
        raise DataError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    part_ids = np.arange(parts) if np.isscalar(parts) else np.asarray(parts, dtype=np.int64)
    if literal:
        correct = int(np.sum(p == t))
        wrong = p.size - correct
        return correct / (correct + 2 * wrong) if p.size else 1.0
    ious = []
    for part in part_ids:
        inter = np.sum((p == part) & (t == part))
        union = np.sum((p == part) | (t == part))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious)) if ious else 1.0


def ins_miou(preds: Sequence, truths: Sequence, parts_per_instance, literal: bool = False) -> float:
    """Mean over instances of each instance's IoU (see :func:`instance_iou`).

    ``parts_per_instance`` is one entry per instance, or a single int/list
    shared by all instances.
    """
    if len(preds) == 0:
        raise DataError("ins_miou needs at least one instance")
    if len(preds) != len(truths):
        raise DataError(f"{len(preds)} predictions vs {len(truths)} ground truths")
    if np.isscalar(parts_per_instance) or (
        len(parts_per_instance) and np.isscalar(parts_per_instance[0]) and len(parts_per_instance) != len(preds)
    ):
        parts_per_instance = [parts_per_instance] * len(preds)
    vals = [instance_iou(p, t, parts, literal) for p, t, parts in zip(preds, truths, parts_per_instance)]
    return float(np.mean(vals))


# ------------------------------------------------------------------ reports
def format_table(rows: Sequence[Sequence], header: Sequence[str], precision: int = 4) -> str:
    """Aligned plain-text table."""
    def fmt(v):
        return f"{v:.{precision}f}" if isinstance(v, (float, np.floating)) else str(v)

    cells = [[fmt(v) for v in header]] + [[fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def to_csv(rows: Iterable[Sequence], header: Sequence[str], path: Optional[str] = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
