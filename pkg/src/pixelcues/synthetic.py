"""Seeded synthetic scenes that reproduce the multi-salient-object failure mode.

Each scene is a noisy background with 1..3 disjoint solid shapes, one color
and shape kind per class. The oracle saliency detector scores only the
strongest remaining shape (area x contrast), so a single pass misses the
others and each erase round reveals exactly one more. Oracle attention slices
are peaked at shape centers and deliberately under-cover the full mask, so
fusing them with saliency demonstrably improves cue recall.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    DatasetManifest,
    ManifestRecord,
    save_manifest,
    write_label_png,
    write_rgb_png,
    write_tensor,
)
from .maps import LabelMap, ScoreMap, normalize_slice
from .saliency import RgbImage, box_blur

SHAPE_KINDS = ("box", "disc", "diamond")

# Attention profile: inside the mask scores run ATT_FLOOR..1 (peaked at the
# center), outside they decay below the floor. With saliency 1 on the mask the
# harmonic mean of the floor is 2*.3/1.3 = 0.46, comfortably above gamma 0.4.
ATT_FLOOR = 0.3
ATT_OUTSIDE = 0.35
_PRESENCE_FRACTION = 0.5


@dataclass(frozen=True)
class ShapeClassSpec:
    name: str
    kind: str
    color: tuple[int, int, int]

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}; expected one of {SHAPE_KINDS}")
        object.__setattr__(self, "color", tuple(int(v) for v in self.color))


DEFAULT_CLASSES = (
    ShapeClassSpec("box", "box", (200, 40, 40)),
    ShapeClassSpec("disc", "disc", (40, 190, 40)),
    ShapeClassSpec("diamond", "diamond", (50, 50, 210)),
)


@dataclass(frozen=True)
class SceneSpec:
    """Canvas geometry, shape population, and texture of generated scenes."""

    width: int = 64
    height: int = 64
    min_shapes: int = 1
    max_shapes: int = 2
    classes: tuple[ShapeClassSpec, ...] = DEFAULT_CLASSES
    size_range: tuple[int, int] = (6, 11)
    noise: int = 8
    background: tuple[int, int, int] = (90, 90, 90)

    def __post_init__(self):
        if not 1 <= self.min_shapes <= self.max_shapes <= 3:
            raise ValueError("shapes per scene must satisfy 1 <= min <= max <= 3")
        if self.max_shapes > len(self.classes):
            raise ValueError("cannot place more shapes than there are classes")
        lo, hi = self.size_range
        if not 3 <= lo <= hi:
            raise ValueError("shape sizes must be >= 3 and ordered")
        if min(self.width, self.height) < 2 * hi + 4:
            raise ValueError("canvas too small for the largest shape")
        if not 0 <= self.noise <= 40:
            raise ValueError("noise level must be in [0, 40]")

    @property
    def label_space(self) -> tuple[str, ...]:
        return ("background",) + tuple(c.name for c in self.classes)


@dataclass(frozen=True)
class Shape:
    class_id: int
    kind: str
    cx: int
    cy: int
    size: int
    color: tuple[int, int, int]
    strength: float

    def to_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "kind": self.kind,
            "cx": self.cx,
            "cy": self.cy,
            "size": self.size,
            "color": list(self.color),
            "strength": self.strength,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Shape":
        return cls(
            class_id=int(doc["class_id"]),
            kind=str(doc["kind"]),
            cx=int(doc["cx"]),
            cy=int(doc["cy"]),
            size=int(doc["size"]),
            color=tuple(int(v) for v in doc["color"]),
            strength=float(doc["strength"]),
        )


def rasterize_mask(shape: Shape, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    dx = xx - shape.cx
    dy = yy - shape.cy
    if shape.kind == "box":
        return (np.abs(dx) <= shape.size) & (np.abs(dy) <= shape.size)
    if shape.kind == "disc":
        return dx * dx + dy * dy <= shape.size * shape.size
    if shape.kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= shape.size
    raise ValueError(f"unknown shape kind {shape.kind!r}")


def strongest_class(shapes: list[Shape]) -> int:
    """Class of the highest-strength shape; ties go to the earliest shape."""
    if not shapes:
        raise ValueError("scene has no shapes")
    strengths = np.asarray([s.strength for s in shapes])
    return shapes[int(np.argmax(strengths))].class_id


def attention_slice(shapes: list[Shape], height: int, width: int) -> np.ndarray:
    """Center-peaked attention blob for one class (max over its shapes)."""
    att = np.zeros((height, width), dtype=np.float64)
    yy, xx = np.mgrid[0:height, 0:width]
    for shape in shapes:
        mask = rasterize_mask(shape, height, width)
        blur_radius = max(1, int(round(0.35 * shape.size)))
        blurred = box_blur(mask.astype(np.float64), blur_radius)
        dist = np.sqrt((xx - shape.cx) ** 2 + (yy - shape.cy) ** 2)
        window = np.clip(1.2 - 0.55 * dist / shape.size, 0.0, 1.0)
        core = blurred * window
        blob = np.where(mask, ATT_FLOOR + (1.0 - ATT_FLOOR) * core, ATT_OUTSIDE * core)
        att = np.maximum(att, blob)
    return normalize_slice(ScoreMap(att.astype(np.float32))).data


@dataclass(frozen=True)
class OracleShapeDetector:
    """Scores only the strongest shape still visible in the image.

    A shape counts as visible while at least half of its pixels keep their
    original fill color, so erasing it (mean-pixel replacement) makes the
    detector move on to the next strongest shape.
    """

    shapes: tuple[Shape, ...]
    height: int
    width: int

    def score(self, image: RgbImage) -> ScoreMap:
        if image.shape != (self.height, self.width):
            raise ValueError(f"detector built for {(self.height, self.width)}, got {image.shape}")
        zeros = np.zeros((self.height, self.width), dtype=np.float32)
        best = None
        best_strength = -1.0
        for shape in self.shapes:
            mask = rasterize_mask(shape, self.height, self.width)
            fill = np.asarray(shape.color, dtype=np.uint8)
            intact = (image.data[mask] == fill).all(axis=1).mean()
            if intact >= _PRESENCE_FRACTION and shape.strength > best_strength:
                best = mask
                best_strength = shape.strength
        if best is None:
            return ScoreMap(zeros, normalized=True)
        return ScoreMap(best.astype(np.float32), normalized=True)

    @classmethod
    def from_record(cls, record: ManifestRecord, height: int, width: int) -> "OracleShapeDetector":
        if not record.scene or "shapes" not in record.scene:
            raise ValueError(f"record {record.image} carries no scene geometry for the oracle detector")
        shapes = tuple(Shape.from_dict(d) for d in record.scene["shapes"])
        return cls(shapes, height, width)


def generate_synthetic(out_dir, seed: int, count: int, spec: SceneSpec | None = None) -> DatasetManifest:
    """Write a seeded synthetic dataset (images, ground truth, oracle maps, manifest)."""
    if count < 1:
        raise ValueError("scene count must be >= 1")
    spec = spec or SceneSpec()
    out_dir = Path(out_dir)
    for sub in ("images", "gt", "attention", "saliency"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    records = []
    color_sums = np.zeros(3, dtype=np.int64)
    pixel_count = 0
    for index in range(count):
        stem = f"scene_{index:04d}"
        shapes = _draw_scene_shapes(rng, spec)
        image, gt = _render(rng, spec, shapes)

        num_objects = len(spec.classes)
        attention = np.zeros((num_objects, spec.height, spec.width), dtype=np.float32)
        for class_id in range(1, num_objects + 1):
            owned = [s for s in shapes if s.class_id == class_id]
            if owned:
                attention[class_id - 1] = attention_slice(owned, spec.height, spec.width)

        detector = OracleShapeDetector(tuple(shapes), spec.height, spec.width)
        initial_saliency = detector.score(image)

        write_rgb_png(out_dir / "images" / f"{stem}.png", image)
        write_label_png(out_dir / "gt" / f"{stem}.png", gt)
        write_tensor(out_dir / "attention" / f"{stem}.dct", attention)
        write_tensor(out_dir / "saliency" / f"{stem}.dct", initial_saliency.data)

        color_sums += image.data.reshape(-1, 3).sum(axis=0, dtype=np.int64)
        pixel_count += spec.height * spec.width
        records.append(
            ManifestRecord(
                image=f"images/{stem}.png",
                tags=tuple(sorted({s.class_id for s in shapes})),
                ground_truth=f"gt/{stem}.png",
                saliency=f"saliency/{stem}.dct",
                attention=f"attention/{stem}.dct",
                scene={"shapes": [s.to_dict() for s in shapes]},
            )
        )

    mean_pixel = tuple(int(v) for v in np.floor(color_sums / pixel_count + 0.5).astype(np.int64))
    manifest = DatasetManifest(
        label_space=spec.label_space,
        mean_pixel=mean_pixel,
        records=records,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def _draw_scene_shapes(rng: np.random.Generator, spec: SceneSpec) -> list[Shape]:
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    class_indices = sorted(int(i) for i in rng.choice(len(spec.classes), size=n, replace=False))
    shapes: list[Shape] = []
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    background = np.asarray(spec.background, dtype=np.float64)
    for ci in class_indices:
        cls = spec.classes[ci]
        for _ in range(200):
            size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            cx = int(rng.integers(size + 1, spec.width - size - 1))
            cy = int(rng.integers(size + 1, spec.height - size - 1))
            candidate = Shape(ci + 1, cls.kind, cx, cy, size, cls.color, 0.0)
            mask = rasterize_mask(candidate, spec.height, spec.width)
            # Keep a >= 3 px gap so attention tails of neighbors stay weak.
            inflated = box_blur(mask.astype(np.float64), 3) > 0
            if not (inflated & occupied).any():
                contrast = float(np.linalg.norm(np.asarray(cls.color, dtype=np.float64) - background))
                strength = float(mask.sum()) * contrast
                shapes.append(
                    Shape(ci + 1, cls.kind, cx, cy, size, cls.color, strength)
                )
                occupied |= mask
                break
        else:
            raise ValueError("could not place a shape; canvas too crowded for the scene spec")
    return shapes


def _render(rng: np.random.Generator, spec: SceneSpec, shapes: list[Shape]) -> tuple[RgbImage, LabelMap]:
    noise = rng.integers(-spec.noise, spec.noise + 1, size=(spec.height, spec.width, 3))
    canvas = np.clip(np.asarray(spec.background, dtype=np.int64) + noise, 0, 255).astype(np.uint8)
    labels = np.zeros((spec.height, spec.width), dtype=np.uint8)
    for shape in shapes:
        mask = rasterize_mask(shape, spec.height, spec.width)
        canvas[mask] = np.asarray(shape.color, dtype=np.uint8)
        labels[mask] = shape.class_id
    return RgbImage(canvas), LabelMap(labels)


def tag_indicator_features(tags_present: set[int], num_labels: int, height: int = 2, width: int = 2):
    """Constant per-class indicator planes; a linearly separable head-training input."""
    from .attention import FeatureVolume

    planes = np.zeros((num_labels - 1, height, width), dtype=np.float32)
    for class_id in tags_present:
        planes[class_id - 1] = 1.0
    return FeatureVolume(planes)
