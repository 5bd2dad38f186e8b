"""Class-specific attention head: 1x1 filters, global average pooling, loss, gradients.

The head is a linear map per class over a K-channel feature volume. Spatially
averaging each class slice gives an image-level score; independent logistic
losses over the present/absent tags train the filters. Gradients are analytic
and checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .maps import ScoreVolume, _frozen, normalize_slice

PROB_CLAMP = 1e-7  # probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP] inside logs

BACKGROUND_LABEL = 0


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    """K x H x W stack of feature planes."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[1] == 0 or arr.shape[2] == 0:
            raise ValueError(f"feature volume must be 3-D (channels, height, width), got {arr.shape}")
        arr = _frozen(arr.astype(np.float32, copy=True))
        if not np.isfinite(arr).all():
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True, eq=False)
class ClassFilterBank:
    """Per-class K-vector weights plus a scalar bias; the trainable head state."""

    class_ids: tuple[int, ...]
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.biases, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != len(ids):
            raise ValueError(f"weights must be (classes, channels), got {w.shape} for {len(ids)} classes")
        if b.shape != (len(ids),):
            raise ValueError(f"biases must be ({len(ids)},), got {b.shape}")
        if len(set(ids)) != len(ids):
            raise ValueError("class ids must be unique")
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "weights", _frozen(w.astype(np.float32)))
        object.__setattr__(self, "biases", _frozen(b.astype(np.float32)))

    @property
    def channels(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class ClassScores:
    """Per-class raw head score and its logistic probability."""

    class_ids: tuple[int, ...]
    raw: np.ndarray
    prob: np.ndarray

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        raw = np.asarray(self.raw, dtype=np.float64)
        prob = np.asarray(self.prob, dtype=np.float64)
        if raw.shape != (len(ids),) or prob.shape != (len(ids),):
            raise ValueError("raw and prob must be one value per class")
        if np.abs(prob - sigmoid(raw)).max(initial=0.0) > 1e-6:
            raise ValueError("probabilities must equal the logistic of the raw scores")
        object.__setattr__(self, "class_ids", ids)
        object.__setattr__(self, "raw", _frozen(raw))
        object.__setattr__(self, "prob", _frozen(prob))

    @classmethod
    def from_raw(cls, class_ids: Sequence[int], raw: np.ndarray) -> "ClassScores":
        raw = np.asarray(raw, dtype=np.float64)
        return cls(tuple(class_ids), raw, sigmoid(raw))


@dataclass(frozen=True)
class ImageTags:
    """Object labels present in an image, within a label space of size num_labels.

    Label 0 is the background and can never be tagged; object ids run
    1..num_labels-1.
    """

    present: frozenset[int]
    num_labels: int

    def __post_init__(self):
        object.__setattr__(self, "present", frozenset(int(c) for c in self.present))
        if self.num_labels < 2:
            raise ValueError("label space needs the background plus at least one object class")
        for c in self.present:
            if not 0 < c < self.num_labels:
                raise ValueError(f"tag {c} outside object label range 1..{self.num_labels - 1}")

    @property
    def object_ids(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_labels))

    def indicator(self, class_ids: Sequence[int]) -> np.ndarray:
        """0/1 vector over the given class ids (1 where tagged present)."""
        return np.array([1.0 if c in self.present else 0.0 for c in class_ids], dtype=np.float64)


def _check_channels(f: FeatureVolume, bank: ClassFilterBank) -> None:
    if f.channels != bank.channels:
        raise ValueError(f"feature volume has {f.channels} channels but filters expect {bank.channels}")


def head_forward(f: FeatureVolume, bank: ClassFilterBank) -> tuple[ScoreVolume, ClassScores]:
    """Apply the per-class filters pointwise, then average-pool into class scores."""
    _check_channels(f, bank)
    feat = f.data.astype(np.float64)
    w = bank.weights.astype(np.float64)
    b = bank.biases.astype(np.float64)
    volume = np.tensordot(w, feat, axes=(1, 0)) + b[:, None, None]
    raw = w @ feat.mean(axis=(1, 2)) + b
    return (
        ScoreVolume(bank.class_ids, volume.astype(np.float32)),
        ClassScores.from_raw(bank.class_ids, raw),
    )


def classification_loss(scores: ClassScores, tags: ImageTags) -> float:
    """Mean over classes of the binary cross-entropy between tags and head scores."""
    if set(scores.class_ids) != set(tags.object_ids):
        raise ValueError("scores must cover exactly the object label set")
    zbar = tags.indicator(scores.class_ids)
    p = np.clip(scores.prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    losses = -zbar * np.log(p) - (1.0 - zbar) * np.log(1.0 - p)
    return float(losses.mean())


def classification_grad(f: FeatureVolume, bank: ClassFilterBank, tags: ImageTags) -> ClassFilterBank:
    """Analytic gradient of classification_loss(head_forward(f, bank), tags).

    Returned in a filter-bank-shaped container: weights hold d loss / d w,
    biases hold d loss / d b.
    """
    _check_channels(f, bank)
    if set(bank.class_ids) != set(tags.object_ids):
        raise ValueError("filter bank must cover exactly the object label set")
    feat = f.data.astype(np.float64)
    w = bank.weights.astype(np.float64)
    b = bank.biases.astype(np.float64)
    feat_sum = feat.sum(axis=(1, 2))
    pixels = f.height * f.width
    raw = w @ (feat_sum / pixels) + b
    resid = sigmoid(raw) - tags.indicator(bank.class_ids)
    num_classes = len(bank.class_ids)
    grad_w = np.outer(resid, feat_sum) / (num_classes * pixels)
    grad_b = resid / num_classes
    return ClassFilterBank(bank.class_ids, grad_w, grad_b)


def init_filter_bank(class_ids: Sequence[int], channels: int, seed: int) -> ClassFilterBank:
    """Zero-mean Gaussian weights (std 0.01) and zero biases, deterministic per seed."""
    ids = tuple(class_ids)
    rng = np.random.default_rng(seed)
    weights = rng.normal(0.0, 0.01, size=(len(ids), channels))
    return ClassFilterBank(ids, weights, np.zeros(len(ids)))


def train_head(
    dataset: Sequence[tuple[FeatureVolume, ImageTags]],
    lr: float,
    steps: int,
    seed: int,
    on_step: Callable[[int, float], None] | None = None,
) -> ClassFilterBank:
    """Full-batch gradient descent on the mean classification loss.

    ``on_step(step, loss)`` reports the pre-update loss at each step. The
    whole run is deterministic given the seed.
    """
    if not dataset:
        raise ValueError("training set must be non-empty")
    channels = dataset[0][0].channels
    class_ids = dataset[0][1].object_ids
    for feat, tags in dataset:
        if feat.channels != channels:
            raise ValueError("all feature volumes must share the channel count")
        if tags.object_ids != class_ids:
            raise ValueError("all images must share the label space")

    bank = init_filter_bank(class_ids, channels, seed)
    w = bank.weights.astype(np.float64)
    b = bank.biases.astype(np.float64)
    for step in range(steps):
        current = ClassFilterBank(class_ids, w, b)
        total_loss = 0.0
        grad_w = np.zeros_like(w)
        grad_b = np.zeros_like(b)
        for feat, tags in dataset:
            _, scores = head_forward(feat, current)
            total_loss += classification_loss(scores, tags)
            g = classification_grad(feat, current, tags)
            grad_w += g.weights.astype(np.float64)
            grad_b += g.biases.astype(np.float64)
        n = len(dataset)
        if on_step is not None:
            on_step(step, total_loss / n)
        w -= lr * grad_w / n
        b -= lr * grad_b / n
    return ClassFilterBank(class_ids, w, b)


def extract_attention(v: ScoreVolume, tags: ImageTags) -> ScoreVolume:
    """Restrict a score volume to the present classes and min-max scale each slice."""
    missing = sorted(c for c in tags.present if c not in v.class_ids)
    if missing:
        raise ValueError(f"volume does not cover tagged classes {missing}")
    ids = tuple(sorted(tags.present))
    if not ids:
        empty = np.zeros((0, v.height, v.width), dtype=np.float32)
        return ScoreVolume((), empty, normalized=True)
    slices = [normalize_slice(v.slice_for(c)).data for c in ids]
    return ScoreVolume(ids, np.stack(slices, axis=0), normalized=True)
