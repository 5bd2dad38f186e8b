"""Turning attention and saliency into pixel-level pseudo-labels.

Each present class's normalized attention slice is combined with the
class-agnostic saliency map (harmonic mean by default); a pixel whose best
combined score falls below gamma is background, otherwise it takes the argmax
class. The adapt step replaces cues with the network's own prediction,
restricted to background plus the classes known present.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .attention import BACKGROUND_LABEL, ImageTags
from .maps import LabelMap, ScoreMap, ScoreVolume, argmax_map


class Combiner(str, Enum):
    HARMONIC = "harmonic"
    ARITHMETIC = "arithmetic"
    GEOMETRIC = "geometric"


@dataclass(frozen=True)
class CueConfig:
    """Background threshold and the attention/saliency combining rule."""

    gamma: float = 0.4
    combiner: Combiner = Combiner.HARMONIC

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma {self.gamma} outside (0, 1)")
        object.__setattr__(self, "combiner", Combiner(self.combiner))


def combine(a, s, combiner: Combiner = Combiner.HARMONIC):
    """Elementwise mean of attention and saliency scores in [0, 1].

    The harmonic mean is taken as 0 where both inputs are 0 (its limit), so a
    zero-saliency pixel can never clear a positive gamma.
    """
    a = np.asarray(a, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    combiner = Combiner(combiner)
    if combiner is Combiner.HARMONIC:
        den = a + s
        num = 2.0 * a * s
        out = np.divide(num, den, out=np.zeros_like(den), where=den > 0)
    elif combiner is Combiner.ARITHMETIC:
        out = (a + s) / 2.0
    else:
        out = np.sqrt(a * s)
    if out.ndim == 0:
        return float(out)
    return out


def discover_cues(attn: ScoreVolume, s: ScoreMap, tags: ImageTags, cfg: CueConfig) -> LabelMap:
    """Label each pixel with the best attention/saliency combination, or background.

    ``attn`` must hold one normalized slice per present class; ties in the
    per-pixel argmax go to the lowest class id, and a best score strictly
    below gamma yields the background label.
    """
    if set(attn.class_ids) != set(tags.present):
        raise ValueError(
            f"attention classes {sorted(attn.class_ids)} do not match tags {sorted(tags.present)}"
        )
    if (attn.height, attn.width) != s.shape:
        raise ValueError(f"attention shape {(attn.height, attn.width)} != saliency shape {s.shape}")
    _check_unit_range(attn.data, "attention")
    _check_unit_range(s.data, "saliency")

    if attn.num_classes == 0:
        return LabelMap(np.full(s.shape, BACKGROUND_LABEL, dtype=np.uint8))

    order = np.argsort(np.asarray(attn.class_ids), kind="stable")
    ids = np.asarray(attn.class_ids, dtype=np.int64)[order]
    fused = combine(attn.data[order], s.data[None, :, :], cfg.combiner)
    best = fused.max(axis=0)
    winner = ids[np.argmax(fused, axis=0)]
    labels = np.where(best < cfg.gamma, BACKGROUND_LABEL, winner).astype(np.uint8)
    return LabelMap(labels)


def adapt_cues(pred: ScoreVolume, tags: ImageTags) -> LabelMap:
    """Per-pixel argmax of the prediction restricted to background plus present tags."""
    if sorted(pred.class_ids) != list(range(tags.num_labels)):
        raise ValueError(
            f"prediction must cover every label 0..{tags.num_labels - 1}, got {sorted(pred.class_ids)}"
        )
    candidates = sorted({BACKGROUND_LABEL} | tags.present)
    idx = [pred.class_ids.index(c) for c in candidates]
    restricted = ScoreVolume(tuple(candidates), pred.data[idx])
    return argmax_map(restricted)


def _check_unit_range(data: np.ndarray, name: str) -> None:
    if data.size and (float(data.min()) < 0.0 or float(data.max()) > 1.0):
        raise ValueError(f"{name} scores must be normalized to [0, 1]")
