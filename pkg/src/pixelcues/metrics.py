"""Segmentation evaluation: confusion matrix, per-class IoU, mIoU, cue quality.

The protocol is dataset-level: one confusion matrix accumulated over every
image (rows = ground truth, columns = prediction, 64-bit counts), IoU divided
out at the end. Ground-truth pixels at the ignore value are excluded; a
prediction containing the ignore value is a pipeline bug and raises. Classes
with an empty IoU denominator are undefined and excluded from the mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .maps import LabelMap


@dataclass(eq=False)
class ConfusionMatrix:
    counts: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
            raise ValueError(f"counts must be a square matrix, got {arr.shape}")
        if (arr < 0).any():
            raise ValueError("counts must be non-negative")
        self.counts = arr.copy()

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionMatrix":
        if num_classes < 1:
            raise ValueError("need at least one class")
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Elementwise sum; merging equals accumulating the sources jointly."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, gt: LabelMap, pred: LabelMap) -> ConfusionMatrix:
    """Count (gt, pred) pairs for every non-ignored ground-truth pixel, in place."""
    if gt.shape != pred.shape:
        raise ValueError(f"ground truth shape {gt.shape} != prediction shape {pred.shape}")
    if (pred.data == pred.ignore_value).any():
        raise ValueError("prediction contains the ignore value; only ground truth may use it")
    mask = gt.data != gt.ignore_value
    g = gt.data[mask].astype(np.int64)
    p = pred.data[mask].astype(np.int64)
    n = cm.num_classes
    if g.size:
        if g.max() >= n or p.max() >= n:
            raise ValueError(f"label outside the {n}-class space")
        np.add.at(cm.counts, (g, p), 1)
    return cm


@dataclass(frozen=True)
class IouResult:
    per_class: np.ndarray  # float64, NaN where undefined
    mean: float

    @property
    def defined(self) -> np.ndarray:
        return ~np.isnan(self.per_class)


def iou(cm: ConfusionMatrix) -> IouResult:
    """Per-class TP / (TP + FP + FN); undefined classes are excluded from the mean."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    denom = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class = np.full(cm.num_classes, np.nan)
    defined = denom > 0
    per_class[defined] = tp[defined] / denom[defined]
    mean = float(per_class[defined].mean()) if defined.any() else float("nan")
    return IouResult(per_class, mean)


def pixel_accuracy(cm: ConfusionMatrix) -> float:
    total = cm.total
    if total == 0:
        return float("nan")
    return float(np.diag(cm.counts).sum() / total)


def cue_quality(gt: LabelMap, cues: LabelMap, class_id: int) -> tuple[Optional[float], Optional[float]]:
    """Precision and recall of the cue pixels claimed for one class.

    Either value is None when its denominator is empty (nothing claimed /
    nothing in the ground truth). Ignored ground-truth pixels are excluded.
    """
    if gt.shape != cues.shape:
        raise ValueError(f"ground truth shape {gt.shape} != cue shape {cues.shape}")
    mask = gt.data != gt.ignore_value
    claimed = (cues.data == class_id) & mask
    actual = (gt.data == class_id) & mask
    hit = int((claimed & actual).sum())
    n_claimed = int(claimed.sum())
    n_actual = int(actual.sum())
    precision = hit / n_claimed if n_claimed else None
    recall = hit / n_actual if n_actual else None
    return precision, recall


def class_precision_recall(cm: ConfusionMatrix) -> list[tuple[Optional[float], Optional[float]]]:
    """Pooled per-class precision/recall read off the confusion matrix."""
    out = []
    for c in range(cm.num_classes):
        tp = int(cm.counts[c, c])
        claimed = int(cm.counts[:, c].sum())
        actual = int(cm.counts[c, :].sum())
        out.append((tp / claimed if claimed else None, tp / actual if actual else None))
    return out


def evaluation_report(cm: ConfusionMatrix, label_names: Sequence[str]) -> dict:
    """JSON-ready summary: per-class IoU/precision/recall, mIoU, pixel accuracy."""
    if len(label_names) != cm.num_classes:
        raise ValueError(f"{len(label_names)} names for {cm.num_classes} classes")
    result = iou(cm)
    pr = class_precision_recall(cm)
    per_class = {}
    for idx, name in enumerate(label_names):
        value = result.per_class[idx]
        precision, recall = pr[idx]
        per_class[name] = {
            "iou": None if np.isnan(value) else float(value),
            "precision": precision,
            "recall": recall,
        }
    return {
        "num_classes": cm.num_classes,
        "evaluated_pixels": cm.total,
        "pixel_accuracy": None if cm.total == 0 else pixel_accuracy(cm),
        "mean_iou": None if np.isnan(result.mean) else result.mean,
        "per_class": per_class,
    }


def format_report_table(report: dict) -> str:
    """Plain-text rendering of an evaluation report for terminals."""
    headers = ("class", "iou", "precision", "recall")
    rows = []
    for name, stats in report["per_class"].items():
        rows.append(
            (
                name,
                _fmt(stats["iou"]),
                _fmt(stats["precision"]),
                _fmt(stats["recall"]),
            )
        )
    rows.append(("mean IoU", _fmt(report["mean_iou"]), "", ""))
    rows.append(("pixel acc", _fmt(report["pixel_accuracy"]), "", ""))
    widths = [max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(4)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"
