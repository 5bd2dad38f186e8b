"""Pipeline orchestration: config resolution, stage runners, parallel fan-out.

Stages communicate only through files named after each record's image stem,
so serial and parallel runs produce byte-identical artifact trees. Reports
carry no timestamps or absolute paths.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .attention import FeatureVolume, extract_attention, train_head
from .cues import Combiner, CueConfig, adapt_cues, discover_cues
from .dataio import (
    DatasetManifest,
    load_manifest,
    load_score_map,
    read_label_png,
    read_rgb_png,
    read_score_map,
    read_tensor,
    write_filter_bank,
    write_label_png,
    write_tensor,
)
from .maps import ScoreVolume
from .metrics import ConfusionMatrix, accumulate, evaluation_report, format_report_table
from .saliency import (
    ContrastDetector,
    DetectorError,
    ErasePolicy,
    ExternalDetector,
    hierarchical_saliency,
)
from .synthetic import OracleShapeDetector, Shape, strongest_class

DETECTOR_KINDS = ("contrast", "oracle", "external")


class UsageError(Exception):
    """Bad flags or config; exit code 1."""


class DataError(Exception):
    """Missing or malformed inputs; exit code 2."""


class StageError(Exception):
    """A pipeline stage failed while running; exit code 3."""


@dataclass(frozen=True)
class PipelineConfig:
    manifest: str | None = None
    out: str = "out"
    thresholds: tuple[float, ...] = (0.7, 0.8)
    rounds: int | None = None
    gamma: float = 0.4
    combiner: str = "harmonic"
    detector: str = "oracle"
    blur_radius: int = 4
    external_command: tuple[str, ...] = ()
    external_timeout: float = 60.0
    external_temp_dir: str | None = None
    mean_pixel: tuple[int, int, int] | None = None
    erase_source: str = "fused"
    workers: int = 1
    seed: int = 0

    def validate(self) -> None:
        for t in self.thresholds:
            if not 0.0 < t <= 1.0:
                raise UsageError(f"erase threshold {t} outside (0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise UsageError(f"gamma {self.gamma} outside (0, 1)")
        try:
            Combiner(self.combiner)
        except ValueError:
            raise UsageError(f"unknown combiner {self.combiner!r}") from None
        if self.detector not in DETECTOR_KINDS:
            raise UsageError(f"unknown detector {self.detector!r}; expected one of {DETECTOR_KINDS}")
        if self.detector == "external" and not self.external_command:
            raise UsageError("external detector requires external_command in the config")
        if self.workers < 1:
            raise UsageError("workers must be >= 1")
        if self.rounds is not None:
            if self.rounds < 1:
                raise UsageError("rounds must be >= 1")
            if self.rounds - 1 > len(self.thresholds):
                raise UsageError(
                    f"{self.rounds} rounds need {self.rounds - 1} thresholds, got {len(self.thresholds)}"
                )
        if self.erase_source not in ("fused", "raw"):
            raise UsageError("erase_source must be 'fused' or 'raw'")

    @property
    def resolved_rounds(self) -> int:
        return self.rounds if self.rounds is not None else len(self.thresholds) + 1


_CONFIG_FIELDS = set(PipelineConfig.__dataclass_fields__)


def resolve_config(config_path: str | None, overrides: dict) -> PipelineConfig:
    """Dataclass defaults, then the JSON config file, then CLI overrides (flags win)."""
    values: dict = {}
    if config_path is not None:
        try:
            doc = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise DataError(f"config file not found: {config_path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file is not valid JSON: {exc}") from None
        version = doc.pop("config_version", 1)
        if version != 1:
            raise UsageError(f"unsupported config_version {version}")
        unknown = set(doc) - _CONFIG_FIELDS
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    values.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("thresholds", "external_command", "mean_pixel"):
        if values.get(key) is not None:
            values[key] = tuple(values[key])
    cfg = PipelineConfig(**values)
    cfg.validate()
    return cfg


def config_echo(cfg: PipelineConfig) -> dict:
    doc = asdict(cfg)
    doc.pop("out", None)  # keep artifact trees location-independent
    doc["config_version"] = 1
    doc["thresholds"] = list(cfg.thresholds)
    doc["external_command"] = list(cfg.external_command)
    doc["mean_pixel"] = list(cfg.mean_pixel) if cfg.mean_pixel is not None else None
    return doc


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_pipeline_manifest(cfg: PipelineConfig) -> DatasetManifest:
    if not cfg.manifest:
        raise UsageError("a manifest path is required (--manifest or config)")
    try:
        return load_manifest(cfg.manifest)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None


def build_detector(cfg: PipelineConfig, manifest: DatasetManifest, record):
    if cfg.detector == "contrast":
        return ContrastDetector(cfg.blur_radius)
    if cfg.detector == "external":
        return ExternalDetector(cfg.external_command, cfg.external_timeout, cfg.external_temp_dir)
    image = read_rgb_png(manifest.resolve(record.image))
    try:
        return OracleShapeDetector.from_record(record, image.height, image.width)
    except ValueError as exc:
        raise DataError(str(exc)) from None


def _check_unique_stems(manifest: DatasetManifest) -> None:
    stems = [r.stem for r in manifest.records]
    if len(set(stems)) != len(stems):
        dupes = sorted({s for s in stems if stems.count(s) > 1})
        raise DataError(f"duplicate image stems across records: {dupes}")


def _erase_policy(cfg: PipelineConfig, manifest: DatasetManifest) -> ErasePolicy:
    mean_pixel = cfg.mean_pixel if cfg.mean_pixel is not None else manifest.mean_pixel
    rounds = cfg.resolved_rounds
    return ErasePolicy(cfg.thresholds[: rounds - 1], mean_pixel, cfg.erase_source)


def _chunks(n: int, workers: int) -> list[list[int]]:
    indices = list(range(n))
    size = max(1, -(-n // workers))
    return [indices[i : i + size] for i in range(0, n, size)]


def _run_chunked(worker, payloads: list, workers: int) -> list:
    if workers <= 1 or len(payloads) <= 1:
        results = [worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(payloads))) as pool:
            results = list(pool.map(worker, payloads))
    merged = []
    for chunk in results:
        merged.extend(chunk)
    return merged


# --- saliency stage ---------------------------------------------------------


def _saliency_chunk(payload):
    manifest_path, cfg, out_dir, indices = payload
    manifest = load_manifest(manifest_path, check_paths=False)
    policy = _erase_policy(cfg, manifest)
    out_dir = Path(out_dir)
    results = []
    for index in indices:
        record = manifest.records[index]
        try:
            image = read_rgb_png(manifest.resolve(record.image))
            detector = build_detector(cfg, manifest, record)
            _, rounds = hierarchical_saliency(image, detector, policy)
            for k, fused in enumerate(rounds, start=1):
                write_tensor(out_dir / f"{record.stem}_s{k}.dct", fused.data)
            results.append((index, None))
        except DetectorError as exc:
            results.append((index, str(exc)))
    return results


def stage_saliency(cfg: PipelineConfig, manifest: DatasetManifest, manifest_path, out_dir) -> dict:
    _check_unique_stems(manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = [
        (str(manifest_path), cfg, str(out_dir), chunk)
        for chunk in _chunks(len(manifest.records), cfg.workers)
    ]
    results = _run_chunked(_saliency_chunk, payloads, cfg.workers)
    failures = [
        {"image": manifest.records[index].image, "error": error}
        for index, error in sorted(results)
        if error is not None
    ]
    report = {
        "completed": len(manifest.records) - len(failures),
        "failed": failures,
        "rounds": cfg.resolved_rounds,
    }
    write_json(out_dir / "saliency_report.json", report)
    if failures:
        raise StageError(f"saliency failed for {len(failures)} image(s); see {out_dir}/saliency_report.json")
    return report


# --- cues stage --------------------------------------------------------------


def _load_attention_volume(manifest: DatasetManifest, record) -> ScoreVolume:
    arr = read_tensor(manifest.resolve(record.attention))
    expected = manifest.num_labels - 1
    if arr.ndim != 3 or arr.dtype != np.float32:
        raise ValueError(f"attention container must be rank-3 f32, got rank {arr.ndim} {arr.dtype}")
    if arr.shape[0] != expected:
        raise ValueError(f"attention container has {arr.shape[0]} slices, label space needs {expected}")
    return ScoreVolume(manifest.object_ids, arr)


def _cues_chunk(payload):
    manifest_path, cfg, saliency_dir, out_dir, indices = payload
    manifest = load_manifest(manifest_path, check_paths=False)
    cue_cfg = CueConfig(cfg.gamma, Combiner(cfg.combiner))
    rounds = cfg.resolved_rounds
    out_dir = Path(out_dir)
    results = []
    for index in indices:
        record = manifest.records[index]
        volume = _load_attention_volume(manifest, record)
        tags = manifest.image_tags(record)
        attn = extract_attention(volume, tags)
        if saliency_dir is not None:
            sal = read_score_map(Path(saliency_dir) / f"{record.stem}_s{rounds}.dct")
        else:
            sal = load_score_map(manifest.resolve(record.saliency))
        cues = discover_cues(attn, sal, tags, cue_cfg)
        write_label_png(out_dir / f"{record.stem}.png", cues)
        values, counts = np.unique(cues.data, return_counts=True)
        results.append((index, {int(v): int(c) for v, c in zip(values, counts)}))
    return results


def stage_cues(cfg: PipelineConfig, manifest: DatasetManifest, manifest_path, saliency_dir, out_dir) -> dict:
    _check_unique_stems(manifest)
    missing = []
    for record in manifest.records:
        if record.attention is None:
            missing.append(f"{record.image}: no attention volume")
        if saliency_dir is None and record.saliency is None:
            missing.append(f"{record.image}: no saliency map")
        elif saliency_dir is not None:
            path = Path(saliency_dir) / f"{record.stem}_s{cfg.resolved_rounds}.dct"
            if not path.exists():
                missing.append(f"{record.image}: missing saliency round file {path.name}")
    if missing:
        raise DataError("cue inputs missing:\n" + "\n".join(missing))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = [
        (str(manifest_path), cfg, None if saliency_dir is None else str(saliency_dir), str(out_dir), chunk)
        for chunk in _chunks(len(manifest.records), cfg.workers)
    ]
    results = _run_chunked(_cues_chunk, payloads, cfg.workers)
    totals = {name: 0 for name in manifest.label_space}
    for _, counts in results:
        for label, count in counts.items():
            totals[manifest.label_space[label]] += count
    summary = {"images": len(manifest.records), "pixel_counts": totals}
    write_json(out_dir / "cue_summary.json", summary)
    return summary


# --- eval stage ---------------------------------------------------------------


def _eval_chunk(payload):
    manifest_path, pred_dir, num_labels, indices = payload
    manifest = load_manifest(manifest_path, check_paths=False)
    pred_dir = Path(pred_dir)
    cm = ConfusionMatrix.zeros(num_labels)
    problems = []
    for index in indices:
        record = manifest.records[index]
        gt = read_label_png(manifest.resolve(record.ground_truth))
        pred_path = pred_dir / f"{record.stem}.png"
        if not pred_path.exists():
            problems.append(f"{record.image}: missing prediction {pred_path.name}")
            continue
        pred = read_label_png(pred_path)
        if pred.shape != gt.shape:
            problems.append(f"{record.image}: prediction shape {pred.shape} != ground truth {gt.shape}")
            continue
        accumulate(cm, gt, pred)
    return [(indices, cm.counts, problems)]


def stage_eval(manifest: DatasetManifest, manifest_path, pred_dir, out_dir, workers: int = 1) -> dict:
    _check_unique_stems(manifest)
    missing_gt = [r.image for r in manifest.records if r.ground_truth is None]
    if missing_gt:
        raise DataError("records without ground truth: " + ", ".join(missing_gt))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payloads = [
        (str(manifest_path), str(pred_dir), manifest.num_labels, chunk)
        for chunk in _chunks(len(manifest.records), workers)
    ]
    results = _run_chunked(_eval_chunk, payloads, workers)
    cm = ConfusionMatrix.zeros(manifest.num_labels)
    problems = []
    for _, counts, chunk_problems in results:
        cm = cm.merge(ConfusionMatrix(counts))
        problems.extend(chunk_problems)
    if problems:
        raise DataError("evaluation input problems:\n" + "\n".join(sorted(problems)))
    report = evaluation_report(cm, manifest.label_space)
    write_json(out_dir / "report.json", report)
    (out_dir / "report.txt").write_text(format_report_table(report) + "\n")
    return report


# --- full pipeline -------------------------------------------------------------


def run_pipeline(cfg: PipelineConfig) -> dict:
    manifest = load_pipeline_manifest(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", config_echo(cfg))
    try:
        stage_saliency(cfg, manifest, cfg.manifest, out / "saliency")
    except StageError:
        raise
    except (OSError, ValueError) as exc:
        raise StageError(f"saliency stage: {exc}") from exc
    try:
        stage_cues(cfg, manifest, cfg.manifest, out / "saliency", out / "cues")
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise StageError(f"cues stage: {exc}") from exc
    try:
        report = stage_eval(manifest, cfg.manifest, out / "cues", out / "eval", cfg.workers)
    except DataError:
        raise
    except (OSError, ValueError) as exc:
        raise StageError(f"eval stage: {exc}") from exc
    return report


def second_object_recall(manifest: DatasetManifest, cues_dir) -> float | None:
    """Pooled recall of every present class that is not its scene's strongest shape."""
    cues_dir = Path(cues_dir)
    hit = 0
    total = 0
    for record in manifest.records:
        if not record.scene or len(record.tags) < 2:
            continue
        shapes = [Shape.from_dict(d) for d in record.scene["shapes"]]
        primary = strongest_class(shapes)
        gt = read_label_png(manifest.resolve(record.ground_truth))
        cues = read_label_png(cues_dir / f"{record.stem}.png")
        for class_id in record.tags:
            if class_id == primary:
                continue
            actual = gt.data == class_id
            hit += int((actual & (cues.data == class_id)).sum())
            total += int(actual.sum())
    if total == 0:
        return None
    return hit / total


def run_paired(cfg: PipelineConfig) -> dict:
    """Run the single-pass and hierarchical variants and report the mIoU delta."""
    if cfg.resolved_rounds < 2:
        raise UsageError("paired mode needs at least 2 saliency rounds to compare against 1")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = {}
    for name, rounds in (("baseline", 1), ("hierarchical", cfg.resolved_rounds)):
        sub_cfg = replace(cfg, rounds=rounds, out=str(out / name))
        report = run_pipeline(sub_cfg)
        manifest = load_pipeline_manifest(sub_cfg)
        variants[name] = {
            "rounds": rounds,
            "mean_iou": report["mean_iou"],
            "second_object_recall": second_object_recall(manifest, out / name / "cues"),
        }
    paired = {
        "baseline": variants["baseline"],
        "hierarchical": variants["hierarchical"],
        "miou_delta": variants["hierarchical"]["mean_iou"] - variants["baseline"]["mean_iou"],
    }
    write_json(out / "paired_report.json", paired)
    return paired


# --- adapt + head training -----------------------------------------------------


def run_adapt(manifest: DatasetManifest, pred_dir, out_dir) -> int:
    _check_unique_stems(manifest)
    pred_dir = Path(pred_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for record in manifest.records:
        path = pred_dir / f"{record.stem}.dct"
        if not path.exists():
            raise DataError(f"{record.image}: missing prediction volume {path.name}")
        arr = read_tensor(path)
        if arr.ndim != 3 or arr.shape[0] != manifest.num_labels:
            raise DataError(
                f"{record.image}: prediction volume must cover all {manifest.num_labels} labels, got shape {arr.shape}"
            )
        pred = ScoreVolume(tuple(range(manifest.num_labels)), arr)
        labels = adapt_cues(pred, manifest.image_tags(record))
        write_label_png(out_dir / f"{record.stem}.png", labels)
    return len(manifest.records)


def run_train_head(manifest: DatasetManifest, features_dir, lr: float, steps: int, seed: int, out_dir) -> dict:
    _check_unique_stems(manifest)
    features_dir = Path(features_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = []
    channels = None
    for record in manifest.records:
        path = features_dir / f"{record.stem}.dct"
        if not path.exists():
            raise DataError(f"{record.image}: missing feature volume {path.name}")
        arr = read_tensor(path)
        if arr.ndim != 3 or arr.dtype != np.float32:
            raise DataError(f"{record.image}: feature container must be rank-3 f32")
        if channels is None:
            channels = arr.shape[0]
        elif arr.shape[0] != channels:
            raise DataError(
                f"{record.image}: feature volume has {arr.shape[0]} channels, expected {channels}"
            )
        dataset.append((FeatureVolume(arr), manifest.image_tags(record)))

    history: list[tuple[int, float]] = []
    bank = train_head(dataset, lr=lr, steps=steps, seed=seed, on_step=lambda s, l: history.append((s, l)))
    write_filter_bank(out_dir / "filter_bank.dct", bank)
    lines = ["step,loss"] + [f"{step},{loss!r}" for step, loss in history]
    (out_dir / "loss_curve.csv").write_text("\n".join(lines) + "\n")
    return {"steps": steps, "final_loss": history[-1][1] if history else None}
