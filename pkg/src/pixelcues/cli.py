"""Command-line entry points chaining the toolkit into runnable pipelines.

Exit codes: 0 success, 1 usage error, 2 data error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path

from .dataio import TensorFormatError
from .metrics import format_report_table
from .pipeline import (
    DataError,
    StageError,
    UsageError,
    load_pipeline_manifest,
    resolve_config,
    run_adapt,
    run_paired,
    run_pipeline,
    run_train_head,
    stage_cues,
    stage_eval,
    stage_saliency,
)
from .saliency import DetectorError
from .synthetic import SceneSpec, generate_synthetic


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON pipeline config; flags override its fields")
    parser.add_argument("--manifest", help="dataset manifest path")
    parser.add_argument("--rounds", type=int, help="total saliency rounds (erases + 1)")
    parser.add_argument("--thresholds", type=float, nargs="+", help="erase thresholds, one per erase round")
    parser.add_argument("--gamma", type=float, help="background threshold for cue discovery")
    parser.add_argument("--combiner", choices=("harmonic", "arithmetic", "geometric"))
    parser.add_argument("--detector", choices=("contrast", "oracle", "external"))
    parser.add_argument("--workers", type=int, help="parallel workers (per image)")
    parser.add_argument("--seed", type=int, help="seed recorded in the run config")
    parser.add_argument("--out", help="output directory")


def _config_from_args(args) -> "PipelineConfig":
    overrides = {
        key: getattr(args, key, None)
        for key in ("manifest", "out", "thresholds", "rounds", "gamma", "combiner", "detector", "workers", "seed")
    }
    return resolve_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixelcues", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", parents=[], help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=24)
    p.add_argument("--min-shapes", type=int, default=1)
    p.add_argument("--max-shapes", type=int, default=2)
    p.add_argument("--canvas", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    p.add_argument("--sizes", type=int, nargs=2, default=(6, 11), metavar=("MIN", "MAX"))
    p.add_argument("--noise", type=int, default=8)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("saliency", help="write per-round saliency maps for every image")
    _add_common(p)
    p.set_defaults(func=cmd_saliency)

    p = sub.add_parser("cues", help="fuse attention and saliency into cue label maps")
    _add_common(p)
    p.add_argument("--saliency", help="directory of saliency rounds (defaults to manifest saliency)")
    p.set_defaults(func=cmd_cues)

    p = sub.add_parser("adapt", help="tag-restricted argmax of prediction volumes")
    _add_common(p)
    p.add_argument("--pred", required=True, help="directory of <stem>.dct prediction volumes")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="VOC-protocol evaluation of predicted label maps")
    _add_common(p)
    p.add_argument("--pred", required=True, help="directory of <stem>.png predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-head", help="train the attention head on feature volumes")
    _add_common(p)
    p.add_argument("--features", required=True, help="directory of <stem>.dct feature volumes")
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("pipeline", help="saliency -> attention extraction -> cues -> eval")
    _add_common(p)
    p.add_argument("--paired", action="store_true", help="also run a 1-round baseline and report the mIoU delta")
    p.set_defaults(func=cmd_pipeline)

    return parser


def cmd_gen_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    spec = SceneSpec(
        width=args.canvas[0],
        height=args.canvas[1],
        min_shapes=args.min_shapes,
        max_shapes=args.max_shapes,
        size_range=tuple(args.sizes),
        noise=args.noise,
    )
    manifest = generate_synthetic(args.out, args.seed, args.count, spec)
    histogram = Counter(len(r.tags) for r in manifest.records)
    shape_stats = ", ".join(f"{k} shape(s) x{histogram[k]}" for k in sorted(histogram))
    print(f"manifest: {Path(args.out) / 'manifest.json'}")
    print(f"scenes: {len(manifest.records)} ({shape_stats}); classes: {len(manifest.label_space) - 1}")
    return 0


def cmd_saliency(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_pipeline_manifest(cfg)
    report = stage_saliency(cfg, manifest, cfg.manifest, cfg.out)
    print(f"saliency rounds: {report['rounds']}; images: {report['completed']}; out: {cfg.out}")
    return 0


def cmd_cues(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_pipeline_manifest(cfg)
    summary = stage_cues(cfg, manifest, cfg.manifest, args.saliency, cfg.out)
    print(f"cue maps: {summary['images']}; out: {cfg.out}")
    return 0


def cmd_adapt(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_pipeline_manifest(cfg)
    n = run_adapt(manifest, args.pred, cfg.out)
    print(f"adapted cues: {n}; out: {cfg.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    manifest = load_pipeline_manifest(cfg)
    report = stage_eval(manifest, cfg.manifest, args.pred, cfg.out, cfg.workers)
    print(format_report_table(report))
    print(f"report: {Path(cfg.out) / 'report.json'}")
    return 0


def cmd_train_head(args) -> int:
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    cfg = _config_from_args(args)
    manifest = load_pipeline_manifest(cfg)
    result = run_train_head(manifest, args.features, args.lr, args.steps, cfg.seed, cfg.out)
    loss = result["final_loss"]
    print(f"trained {result['steps']} step(s); final loss: {'n/a' if loss is None else f'{loss:.6f}'}")
    print(f"filter bank: {Path(cfg.out) / 'filter_bank.dct'}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _config_from_args(args)
    if args.paired:
        paired = run_paired(cfg)
        print(
            "paired run: mIoU {b:.4f} (1 round) -> {h:.4f} ({r} rounds), delta {d:+.4f}".format(
                b=paired["baseline"]["mean_iou"],
                h=paired["hierarchical"]["mean_iou"],
                r=paired["hierarchical"]["rounds"],
                d=paired["miou_delta"],
            )
        )
        print(f"paired report: {Path(cfg.out) / 'paired_report.json'}")
    else:
        report = run_pipeline(cfg)
        print(f"pipeline mIoU: {report['mean_iou']:.4f}")
        print(f"report: {Path(cfg.out) / 'eval' / 'report.json'}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, TensorFormatError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (StageError, DetectorError) as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
