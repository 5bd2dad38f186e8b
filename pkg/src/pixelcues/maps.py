"""Dense score maps, score volumes, and label maps plus the pointwise math they share.

Scores are stored as 32-bit floats; every reduction that feeds a reported
number (sums, softmax denominators) runs through 64-bit accumulators so
results do not depend on traversal order at the tested tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IGNORE_LABEL = 255
MAX_CLASS_ID = 254  # 255 is reserved for the ignore value


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """An H x W map of per-pixel scores.

    ``normalized`` asserts that every value lies in [0, 1]; constructors of
    normalized maps (min-max scaling, softmax, detectors) set it.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"score map must be a non-empty 2-D array, got shape {arr.shape}")
        arr = _frozen(arr.astype(np.float32, copy=True))
        if not np.isfinite(arr).all():
            raise ValueError("score map values must be finite")
        if self.normalized and (float(arr.min()) < 0.0 or float(arr.max()) > 1.0):
            raise ValueError("normalized score map has values outside [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class ScoreVolume:
    """A stack of same-sized score maps keyed by class id (C x H x W)."""

    class_ids: tuple[int, ...]
    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"score volume must be 3-D (classes, height, width), got shape {arr.shape}")
        if arr.shape[0] != len(ids):
            raise ValueError(f"{len(ids)} class ids but {arr.shape[0]} slices")
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        if arr.shape[1] == 0 or arr.shape[2] == 0:
            raise ValueError("score volume slices must be non-empty")
        arr = _frozen(arr.astype(np.float32, copy=True))
        if not np.isfinite(arr).all():
            raise ValueError("score volume values must be finite")
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "data", arr)

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def slice_for(self, class_id: int) -> ScoreMap:
        try:
            idx = self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class id {class_id} not in volume") from None
        return ScoreMap(self.data[idx], normalized=self.normalized)

    @classmethod
    def from_maps(cls, maps: dict[int, ScoreMap], normalized: bool = False) -> "ScoreVolume":
        """Stack maps in ascending class-id order."""
        ids = tuple(sorted(maps))
        if not ids:
            raise ValueError("cannot build a volume from zero maps without dimensions")
        stack = np.stack([maps[c].data for c in ids], axis=0)
        return cls(ids, stack, normalized=normalized)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """An H x W map of class indices with a reserved ignore value (255)."""

    data: np.ndarray
    ignore_value: int = IGNORE_LABEL

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"label map must be a non-empty 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if arr.min() < 0 or arr.max() > 255:
                raise ValueError("label values must fit in an unsigned byte")
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _frozen(arr.copy()))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def normalize_slice(m: ScoreMap) -> ScoreMap:
    """Min-max scale a map to [0, 1]; a constant map becomes all zeros.

    A featureless slice should claim no pixels, hence zeros rather than ones.
    """
    data = m.data.astype(np.float64)
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        out = np.zeros_like(data)
    else:
        out = (data - lo) / (hi - lo)
    return ScoreMap(out.astype(np.float32), normalized=True)


def fuse_max(a: ScoreMap, b: ScoreMap) -> ScoreMap:
    """Pointwise maximum of two equally sized maps."""
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse maps of shapes {a.shape} and {b.shape}")
    return ScoreMap(np.maximum(a.data, b.data), normalized=a.normalized and b.normalized)


def resize_bilinear(m: ScoreMap, new_w: int, new_h: int) -> ScoreMap:
    """Bilinear resample with half-pixel-center alignment.

    Source coordinates are clamped at the borders, so constants are preserved
    and a same-size call returns a value-identical map.
    """
    if new_w < 1 or new_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {new_w}x{new_h}")
    if (new_h, new_w) == m.shape:
        return ScoreMap(m.data, normalized=m.normalized)

    src = m.data.astype(np.float64)
    h, w = m.shape
    ys = (np.arange(new_h, dtype=np.float64) + 0.5) * (h / new_h) - 0.5
    xs = (np.arange(new_w, dtype=np.float64) + 0.5) * (w / new_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)

    p00 = src[np.ix_(y0c, x0c)]
    p01 = src[np.ix_(y0c, x1c)]
    p10 = src[np.ix_(y1c, x0c)]
    p11 = src[np.ix_(y1c, x1c)]
    out = (
        (1.0 - wy) * (1.0 - wx) * p00
        + (1.0 - wy) * wx * p01
        + wy * (1.0 - wx) * p10
        + wy * wx * p11
    )
    return ScoreMap(out.astype(np.float32), normalized=m.normalized)


def softmax_volume(v: ScoreVolume) -> ScoreVolume:
    """Exp-normalize the channels at every pixel; channels sum to 1."""
    if v.num_classes < 1:
        raise ValueError("softmax needs at least one class")
    x = v.data.astype(np.float64)
    x = x - x.max(axis=0, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=0, keepdims=True)
    return ScoreVolume(v.class_ids, out.astype(np.float32), normalized=True)


def argmax_map(v: ScoreVolume) -> LabelMap:
    """Per-pixel class id with the highest score; ties go to the lowest id."""
    if v.num_classes < 1:
        raise ValueError("argmax needs at least one class")
    ids = np.asarray(v.class_ids, dtype=np.int64)
    if ids.min() < 0 or ids.max() > MAX_CLASS_ID:
        raise ValueError(f"class ids must lie in [0, {MAX_CLASS_ID}]")
    order = np.argsort(ids, kind="stable")
    # With channels in ascending-id order, argmax's first-hit rule is the
    # lowest-class-id tie-break.
    winner = np.argmax(v.data[order], axis=0)
    labels = ids[order][winner].astype(np.uint8)
    return LabelMap(labels)
