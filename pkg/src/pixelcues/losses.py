"""Training objective: pixel-wise cross-entropy plus the classification loss.

The segmentation term averages -log p(target) over non-ignored pixels so its
magnitude is independent of image size and commensurate with the per-class
mean of the classification term; the combined objective is their (optionally
weighted) sum, defaulting to 1:1.
"""

from __future__ import annotations

import math
import warnings

import numpy as np

from .attention import PROB_CLAMP
from .maps import LabelMap, ScoreVolume


def segmentation_loss(pred_softmax: ScoreVolume, target: LabelMap) -> float:
    """Mean -log p at each pixel's target label, skipping the ignore value."""
    num_labels = pred_softmax.num_classes
    if sorted(pred_softmax.class_ids) != list(range(num_labels)):
        raise ValueError(f"prediction must cover labels 0..{num_labels - 1}, got {sorted(pred_softmax.class_ids)}")
    if (pred_softmax.height, pred_softmax.width) != target.shape:
        raise ValueError(
            f"prediction shape {(pred_softmax.height, pred_softmax.width)} != target shape {target.shape}"
        )
    sums = pred_softmax.data.astype(np.float64).sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-3:
        raise ValueError("prediction channels must be softmax-normalized")

    labels = target.data
    mask = labels != target.ignore_value
    if not mask.any():
        warnings.warn("all pixels ignored; segmentation loss is 0", RuntimeWarning, stacklevel=2)
        return 0.0
    picked = labels[mask].astype(np.int64)
    if picked.max() >= num_labels:
        raise ValueError(f"target contains label {picked.max()} outside the label space")

    channel = np.empty(num_labels, dtype=np.int64)
    channel[np.asarray(pred_softmax.class_ids)] = np.arange(num_labels)
    rows, cols = np.nonzero(mask)
    probs = pred_softmax.data[channel[picked], rows, cols].astype(np.float64)
    probs = np.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-np.log(probs)))


def combined_loss(cls_loss: float, seg_loss: float, seg_weight: float = 1.0) -> float:
    """Sum of the classification and segmentation terms (1:1 by default)."""
    for name, value in (("classification", cls_loss), ("segmentation", seg_loss)):
        if not math.isfinite(value) or value < 0.0:
            raise ValueError(f"{name} loss must be finite and >= 0, got {value}")
    return cls_loss + seg_weight * seg_loss
