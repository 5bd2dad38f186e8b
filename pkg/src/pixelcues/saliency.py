"""Hierarchical saliency: detect, erase the most salient region, rescore, fuse.

A detector is anything with ``score(image) -> ScoreMap`` whose output is
normalized and matches the image dimensions; the contract is enforced at the
boundary. Erasing replaces pixels whose saliency strictly exceeds the round's
threshold with the dataset mean color, so the detector can discover the next
most salient region on the erased image. Rounds are fused by pointwise max.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .maps import ScoreMap, _frozen, fuse_max, normalize_slice

ERASE_SOURCES = ("fused", "raw")


class DetectorError(RuntimeError):
    """A saliency detector failed or broke its output contract."""


@dataclass(frozen=True, eq=False)
class RgbImage:
    """H x W image of 8-bit RGB triples."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"image must be (height, width, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValueError("image data must be uint8")
        object.__setattr__(self, "data", _frozen(arr.copy()))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


class SaliencyDetector(Protocol):
    def score(self, image: RgbImage) -> ScoreMap: ...


@dataclass(frozen=True)
class ErasePolicy:
    """Erase thresholds (one per erase round) and the replacement color.

    ``erase_source`` selects which map drives each erase: the fused map from
    all rounds so far (default; already-claimed regions stay erased) or the
    latest raw detector output.
    """

    thresholds: tuple[float, ...] = (0.7, 0.8)
    mean_pixel: tuple[int, int, int] = (128, 128, 128)
    erase_source: str = "fused"

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "mean_pixel", tuple(int(v) for v in self.mean_pixel))
        for t in self.thresholds:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"erase threshold {t} outside (0, 1]")
        if len(self.mean_pixel) != 3 or any(not 0 <= v <= 255 for v in self.mean_pixel):
            raise ValueError("mean pixel must be an 8-bit RGB triple")
        if self.erase_source not in ERASE_SOURCES:
            raise ValueError(f"erase_source must be one of {ERASE_SOURCES}")

    @property
    def rounds(self) -> int:
        return len(self.thresholds) + 1


def erase(image: RgbImage, s: ScoreMap, threshold: float, mean_pixel: tuple[int, int, int]) -> RgbImage:
    """Replace pixels with saliency strictly above the threshold by mean_pixel."""
    if s.shape != image.shape:
        raise ValueError(f"saliency shape {s.shape} does not match image shape {image.shape}")
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1]")
    out = image.data.copy()
    out[s.data > threshold] = np.asarray(mean_pixel, dtype=np.uint8)
    return RgbImage(out)


def _checked_score(detector: SaliencyDetector, image: RgbImage) -> ScoreMap:
    out = detector.score(image)
    if out.shape != image.shape:
        raise DetectorError(f"detector returned shape {out.shape} for image shape {image.shape}")
    if float(out.data.min()) < 0.0 or float(out.data.max()) > 1.0:
        raise DetectorError("detector output must lie in [0, 1]")
    return out


def hierarchical_saliency(
    image: RgbImage, detector: SaliencyDetector, policy: ErasePolicy
) -> tuple[ScoreMap, list[ScoreMap]]:
    """Run detect / erase / rescore / max-fuse for every threshold in the policy.

    Returns the final fused map and the fused map after each round (the first
    entry is the raw initial detection).
    """
    first = _checked_score(detector, image)
    rounds = [first]
    fused = first
    raw = first
    work = image
    for threshold in policy.thresholds:
        source = fused if policy.erase_source == "fused" else raw
        work = erase(work, source, threshold, policy.mean_pixel)
        raw = _checked_score(detector, work)
        fused = fuse_max(fused, raw)
        rounds.append(fused)
    return fused, rounds


def box_blur(values: np.ndarray, radius: int) -> np.ndarray:
    """Mean filter over a (2r+1)^2 window, renormalized at the borders."""
    if radius < 0:
        raise ValueError("blur radius must be >= 0")
    data = np.asarray(values, dtype=np.float64)
    if radius == 0:
        return data.copy()
    summed = _window_sum(data, radius)
    counts = _window_sum(np.ones_like(data), radius)
    return summed / counts


def _window_sum(data: np.ndarray, radius: int) -> np.ndarray:
    out = data
    for axis in (0, 1):
        n = out.shape[axis]
        csum = np.cumsum(out, axis=axis)
        csum = np.concatenate([np.zeros_like(np.take(csum, [0], axis=axis)), csum], axis=axis)
        hi = np.minimum(np.arange(n) + radius + 1, n)
        lo = np.maximum(np.arange(n) - radius, 0)
        out = np.take(csum, hi, axis=axis) - np.take(csum, lo, axis=axis)
    return out


def contrast_saliency(image: RgbImage, blur_radius: int) -> ScoreMap:
    """Built-in detector: blurred distance from the image's mean color, min-max scaled."""
    if blur_radius < 0:
        raise ValueError("blur radius must be >= 0")
    rgb = image.data.astype(np.float64)
    mean_color = rgb.mean(axis=(0, 1))
    dist = np.sqrt(((rgb - mean_color) ** 2).sum(axis=2))
    blurred = box_blur(dist, blur_radius)
    return normalize_slice(ScoreMap(blurred.astype(np.float32)))


@dataclass(frozen=True)
class ContrastDetector:
    """Deterministic default detector backed by contrast_saliency."""

    blur_radius: int = 4

    def score(self, image: RgbImage) -> ScoreMap:
        return contrast_saliency(image, self.blur_radius)


@dataclass(frozen=True)
class ExternalDetector:
    """File-exchange bridge to an external saliency command.

    The image goes out as an RGB PNG, the command runs with ``{input}`` and
    ``{output}`` substituted into its arguments, and a grayscale PNG (8- or
    16-bit) comes back, rescaled to [0, 1].
    """

    command: tuple[str, ...]
    timeout: float = 60.0
    temp_dir: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "command", tuple(str(a) for a in self.command))
        if not self.command:
            raise ValueError("external detector needs a non-empty command")

    def score(self, image: RgbImage) -> ScoreMap:
        from .dataio import read_gray_score_map, write_rgb_png

        with tempfile.TemporaryDirectory(dir=self.temp_dir) as tmp:
            inp = Path(tmp) / "input.png"
            outp = Path(tmp) / "saliency.png"
            write_rgb_png(inp, image)
            argv = [a.format(input=str(inp), output=str(outp)) for a in self.command]
            try:
                proc = subprocess.run(
                    argv, capture_output=True, text=True, timeout=self.timeout
                )
            except subprocess.TimeoutExpired as exc:
                raise DetectorError(f"detector command timed out after {self.timeout}s") from exc
            except OSError as exc:
                raise DetectorError(f"detector command failed to start: {exc}") from exc
            if proc.returncode != 0:
                raise DetectorError(
                    f"detector command exited {proc.returncode}: {proc.stderr.strip()[:500]}"
                )
            if not outp.exists():
                raise DetectorError("detector command produced no output file")
            try:
                return read_gray_score_map(outp)
            except ValueError as exc:
                raise DetectorError(f"detector output unreadable: {exc}") from exc
