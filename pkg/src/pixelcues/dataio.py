"""Persistence: palette label PNGs, a binary tensor container, dataset manifests.

File formats
------------
Label maps are 8-bit indexed PNGs carrying the standard VOC 256-entry palette,
generated algorithmically (bit-reversal rule below). Dense tensors use a small
versioned container:

    magic  "DCT1"                (4 bytes)
    dtype  code: 1 = f32, 2 = u8 (1 byte)
    rank   2..8                  (1 byte)
    dims   rank x u64            (little-endian)
    payload                      (row-major, little-endian f32 or u8)

Round-trips are bit-exact; bad magic, truncation, and dimension overflow raise
distinct error types. Manifests are JSON documents whose record paths resolve
relative to the manifest file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .attention import ImageTags
from .maps import LabelMap, ScoreMap
from .saliency import RgbImage

_MAGIC = b"DCT1"
_CODE_F32 = 1
_CODE_U8 = 2
_MIN_RANK = 2
_MAX_RANK = 8
_MAX_ELEMENTS = 1 << 40
_MAX_PNG_DIM = 1 << 16


class TensorFormatError(ValueError):
    """Base error for malformed tensor container files."""


class TensorMagicError(TensorFormatError):
    """File does not start with the container magic."""


class TensorTruncatedError(TensorFormatError):
    """File ends before the declared payload (or header) is complete."""


class TensorDimError(TensorFormatError):
    """Rank or dimensions outside the supported range."""


def voc_palette() -> np.ndarray:
    """The 256-entry VOC color table, built by the bit-reversal rule.

    Color bit j of channel k comes from label bit 3*j + k, packed from the
    high end; e.g. index 1 -> (128, 0, 0), index 255 -> (224, 224, 192).
    """
    palette = np.zeros((256, 3), dtype=np.uint8)
    for idx in range(256):
        value = idx
        rgb = [0, 0, 0]
        for bit in range(8):
            for channel in range(3):
                rgb[channel] |= ((value >> channel) & 1) << (7 - bit)
            value >>= 3
        palette[idx] = rgb
    return palette


_VOC_PALETTE = voc_palette()


def write_label_png(path, m: LabelMap, palette: np.ndarray | None = None) -> None:
    """Write a label map as an 8-bit indexed PNG with the given (default VOC) palette."""
    if palette is None:
        palette = _VOC_PALETTE
    img = Image.fromarray(np.asarray(m.data), mode="P")
    img.putpalette(np.asarray(palette, dtype=np.uint8).flatten().tolist())
    img.save(str(path), format="PNG")


def read_label_png(path) -> LabelMap:
    with Image.open(str(path)) as img:
        if img.mode != "P":
            raise ValueError(f"label maps must be indexed PNGs, got mode {img.mode}")
        _check_png_dims(img)
        data = np.asarray(img, dtype=np.uint8)
    return LabelMap(data)


def write_rgb_png(path, image: RgbImage) -> None:
    Image.fromarray(np.asarray(image.data), mode="RGB").save(str(path), format="PNG")


def read_rgb_png(path) -> RgbImage:
    with Image.open(str(path)) as img:
        if img.mode != "RGB":
            raise ValueError(f"expected an RGB PNG, got mode {img.mode}")
        _check_png_dims(img)
        data = np.asarray(img, dtype=np.uint8)
    return RgbImage(data)


def read_gray_score_map(path) -> ScoreMap:
    """Read an 8- or 16-bit grayscale PNG and rescale it to [0, 1]."""
    with Image.open(str(path)) as img:
        _check_png_dims(img)
        if img.mode == "L":
            scale = 255.0
            data = np.asarray(img, dtype=np.float64)
        elif img.mode in ("I;16", "I"):
            scale = 65535.0
            data = np.asarray(img, dtype=np.float64)
        else:
            raise ValueError(f"expected an 8- or 16-bit grayscale PNG, got mode {img.mode}")
    if data.min() < 0 or data.max() > scale:
        raise ValueError("grayscale sample values outside the declared bit depth")
    return ScoreMap((data / scale).astype(np.float32), normalized=True)


def _check_png_dims(img: Image.Image) -> None:
    if img.width > _MAX_PNG_DIM or img.height > _MAX_PNG_DIM:
        raise ValueError(f"image dimensions {img.width}x{img.height} exceed the supported range")


def write_tensor(path, array: np.ndarray) -> None:
    """Serialize a float32 or uint8 array (rank 2..8) into the container format."""
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code = _CODE_F32
        payload = arr.astype("<f4", copy=False).tobytes()
    elif arr.dtype == np.uint8:
        code = _CODE_U8
        payload = arr.tobytes()
    else:
        raise ValueError(f"container supports f32 and u8 payloads, not {arr.dtype}")
    if not _MIN_RANK <= arr.ndim <= _MAX_RANK:
        raise TensorDimError(f"rank must be in [{_MIN_RANK}, {_MAX_RANK}], got {arr.ndim}")
    if arr.size > _MAX_ELEMENTS:
        raise TensorDimError(f"tensor of {arr.size} elements exceeds the container limit")
    header = _MAGIC + bytes([code, arr.ndim])
    header += b"".join(struct.pack("<Q", d) for d in arr.shape)
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < len(_MAGIC):
        raise TensorTruncatedError("file shorter than the container magic")
    if blob[: len(_MAGIC)] != _MAGIC:
        raise TensorMagicError("bad container magic")
    if len(blob) < 6:
        raise TensorTruncatedError("file ends inside the container header")
    code, rank = blob[4], blob[5]
    if code == _CODE_F32:
        dtype, item = "<f4", 4
    elif code == _CODE_U8:
        dtype, item = "u1", 1
    else:
        raise TensorFormatError(f"unknown element-type code {code}")
    if not _MIN_RANK <= rank <= _MAX_RANK:
        raise TensorDimError(f"rank must be in [{_MIN_RANK}, {_MAX_RANK}], got {rank}")
    dims_end = 6 + 8 * rank
    if len(blob) < dims_end:
        raise TensorTruncatedError("file ends inside the dimension list")
    dims = struct.unpack(f"<{rank}Q", blob[6:dims_end])
    if any(d == 0 for d in dims):
        raise TensorDimError(f"zero dimension in {dims}")
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise TensorDimError(f"dimensions {dims} overflow the container limit")
    expected = dims_end + count * item
    if len(blob) < expected:
        raise TensorTruncatedError(f"payload truncated: expected {expected} bytes, got {len(blob)}")
    if len(blob) > expected:
        raise TensorFormatError(f"{len(blob) - expected} trailing bytes after the payload")
    flat = np.frombuffer(blob, dtype=dtype, count=count, offset=dims_end)
    out = flat.reshape(dims).copy()
    if code == _CODE_F32:
        out = out.astype(np.float32, copy=False)
    return out


def write_filter_bank(path, bank) -> None:
    """Pack a filter bank as a rank-2 f32 container: per class, K weights then the bias."""
    packed = np.concatenate([bank.weights, bank.biases[:, None]], axis=1)
    write_tensor(path, np.ascontiguousarray(packed, dtype=np.float32))


def read_filter_bank(path, class_ids=None):
    from .attention import ClassFilterBank

    arr = read_tensor(path)
    if arr.ndim != 2 or arr.dtype != np.float32 or arr.shape[1] < 2:
        raise TensorFormatError(f"filter bank container must be (classes, channels + 1) f32, got {arr.shape}")
    ids = tuple(class_ids) if class_ids is not None else tuple(range(1, arr.shape[0] + 1))
    return ClassFilterBank(ids, arr[:, :-1], arr[:, -1])


def write_score_map(path, m: ScoreMap) -> None:
    write_tensor(path, m.data)


def read_score_map(path) -> ScoreMap:
    arr = read_tensor(path)
    if arr.ndim != 2 or arr.dtype != np.float32:
        raise TensorFormatError(f"expected a rank-2 f32 container, got rank {arr.ndim} {arr.dtype}")
    return ScoreMap(arr)


def load_score_map(path) -> ScoreMap:
    """Read a saliency map from either a grayscale PNG or a tensor container."""
    if str(path).endswith(".png"):
        return read_gray_score_map(path)
    return read_score_map(path)


@dataclass
class ManifestRecord:
    image: str
    tags: tuple[int, ...]
    ground_truth: str | None = None
    saliency: str | None = None
    attention: str | None = None
    scene: dict | None = None

    def __post_init__(self):
        self.tags = tuple(sorted(int(t) for t in self.tags))

    @property
    def stem(self) -> str:
        return Path(self.image).stem


@dataclass
class DatasetManifest:
    """A weak dataset: images plus their object tags and optional sidecar maps."""

    label_space: tuple[str, ...]
    mean_pixel: tuple[int, int, int]
    records: list[ManifestRecord] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        self.label_space = tuple(str(n) for n in self.label_space)
        self.mean_pixel = tuple(int(v) for v in self.mean_pixel)
        if len(self.label_space) < 2:
            raise ValueError("label space needs the background plus at least one object class")
        if len(set(self.label_space)) != len(self.label_space):
            raise ValueError("label names must be unique")
        if len(self.mean_pixel) != 3 or any(not 0 <= v <= 255 for v in self.mean_pixel):
            raise ValueError("mean pixel must be an 8-bit RGB triple")
        for record in self.records:
            for t in record.tags:
                if not 0 < t < self.num_labels:
                    raise ValueError(f"record {record.image}: tag {t} outside 1..{self.num_labels - 1}")
        self.root = Path(self.root)

    @property
    def num_labels(self) -> int:
        return len(self.label_space)

    @property
    def object_ids(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_labels))

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def image_tags(self, record: ManifestRecord) -> ImageTags:
        return ImageTags(frozenset(record.tags), self.num_labels)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    records = []
    for record in manifest.records:
        entry = {"image": record.image, "tags": list(record.tags)}
        for key in ("ground_truth", "saliency", "attention"):
            value = getattr(record, key)
            if value is not None:
                entry[key] = value
        if record.scene is not None:
            entry["scene"] = record.scene
        records.append(entry)
    doc = {
        "manifest_version": 1,
        "label_space": list(manifest.label_space),
        "mean_pixel": list(manifest.mean_pixel),
        "records": records,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON: {exc}") from exc
    try:
        records = [
            ManifestRecord(
                image=entry["image"],
                tags=tuple(entry.get("tags", ())),
                ground_truth=entry.get("ground_truth"),
                saliency=entry.get("saliency"),
                attention=entry.get("attention"),
                scene=entry.get("scene"),
            )
            for entry in doc["records"]
        ]
        manifest = DatasetManifest(
            label_space=tuple(doc["label_space"]),
            mean_pixel=tuple(doc["mean_pixel"]),
            records=records,
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: malformed manifest: {exc}") from exc
    if check_paths:
        missing = []
        for record in manifest.records:
            for key in ("image", "ground_truth", "saliency", "attention"):
                value = getattr(record, key)
                if value is not None and not manifest.resolve(value).exists():
                    missing.append(f"{record.image}: missing {key} file {value}")
        if missing:
            raise FileNotFoundError(f"{path}: unresolvable paths:\n" + "\n".join(missing))
    return manifest


def dataset_mean_pixel(manifest: DatasetManifest) -> tuple[int, int, int]:
    """Per-channel mean over every pixel of every image, rounded half-up to 8 bits."""
    if not manifest.records:
        raise ValueError("cannot compute a mean pixel over an empty dataset")
    sums = np.zeros(3, dtype=np.int64)
    count = 0
    for record in manifest.records:
        image = read_rgb_png(manifest.resolve(record.image))
        sums += image.data.reshape(-1, 3).sum(axis=0, dtype=np.int64)
        count += image.height * image.width
    means = sums / count
    return tuple(int(v) for v in np.floor(means + 0.5).astype(np.int64))
