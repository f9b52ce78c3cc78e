"""Batch command-line interface.

Subcommands run one pipeline stage each into an output directory; re-running
a stage with unchanged config and inputs is a cached no-op. Exit codes:
0 success, 2 config error, 3 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig
from .errors import BadConfig, MissingArtifact


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config value (repeatable)",
    )
    parser.add_argument("--out", type=Path, required=True, help="stage output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vpd", description="pose-distillation pipeline stages"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic clip archive")
    _add_common(p)

    p = sub.add_parser("teacher", help="teacher feature stores (and embedder)")
    _add_common(p)
    p.add_argument("--archive", type=Path, required=True)

    p = sub.add_parser("distill", help="train the student")
    _add_common(p)
    p.add_argument("--archive", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)

    p = sub.add_parser("extract", help="student features for every frame")
    _add_common(p)
    p.add_argument("--archive", type=Path, required=True)
    p.add_argument("--distill", type=Path, required=True)

    for name, needs_flip in (
        ("train-cls", True),
        ("fewshot", True),
        ("retrieve", True),
        ("detect", False),
    ):
        p = sub.add_parser(name)
        _add_common(p)
        p.add_argument("--archive", type=Path, required=True)
        p.add_argument("--store", type=Path, required=True, help="feature store file")
        if needs_flip:
            p.add_argument("--flip-store", type=Path, required=True)

    p = sub.add_parser("eval", help="fill-in-the-gaps feature quality metric")
    _add_common(p)
    p.add_argument("--archive", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)
    p.add_argument("--extract", type=Path, required=True)

    p = sub.add_parser("sweep", help="selection-threshold sweep")
    _add_common(p)
    p.add_argument("--archive", type=Path, required=True)
    p.add_argument("--teacher", type=Path, required=True)

    return parser


def _check_exists(*paths):
    for path in paths:
        if path is not None and not Path(path).exists():
            raise MissingArtifact(f"input does not exist: {path}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from . import pipeline

    try:
        config = RunConfig.load(args.config, args.overrides)
        if args.command == "synth":
            manifest = pipeline.stage_synth(config, args.out)
        elif args.command == "teacher":
            _check_exists(args.archive)
            manifest = pipeline.stage_teacher(config, args.archive, args.out)
        elif args.command == "distill":
            _check_exists(args.archive, args.teacher)
            manifest = pipeline.stage_distill(config, args.archive, args.teacher, args.out)
        elif args.command == "extract":
            _check_exists(args.archive, args.distill)
            manifest = pipeline.stage_extract(config, args.archive, args.distill, args.out)
        elif args.command == "train-cls":
            _check_exists(args.archive, args.store, args.flip_store)
            manifest = pipeline.stage_train_cls(
                config, args.archive, args.store, args.flip_store, args.out
            )
        elif args.command == "fewshot":
            _check_exists(args.archive, args.store, args.flip_store)
            manifest = pipeline.stage_fewshot(
                config, args.archive, args.store, args.flip_store, args.out
            )
        elif args.command == "retrieve":
            _check_exists(args.archive, args.store, args.flip_store)
            manifest = pipeline.stage_retrieve(
                config, args.archive, args.store, args.flip_store, args.out
            )
        elif args.command == "detect":
            _check_exists(args.archive, args.store)
            manifest = pipeline.stage_detect(config, args.archive, args.store, args.out)
        elif args.command == "eval":
            _check_exists(args.archive, args.teacher, args.extract)
            manifest = pipeline.stage_eval(
                config, args.archive, args.teacher, args.extract, args.out
            )
        elif args.command == "sweep":
            _check_exists(args.archive, args.teacher)
            manifest = pipeline.stage_sweep(config, args.archive, args.teacher, args.out)
        else:  # pragma: no cover
            raise BadConfig(f"unknown command {args.command}")
    except BadConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return 3

    print(json.dumps({"stage": manifest["stage"], "combined": manifest["combined"]}))
    for metrics_name in ("metrics.json", "summary.json", "ap.json", "sweep_summary.json"):
        path = Path(args.out) / metrics_name
        if path.exists():
            print(path.read_text().strip())
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
