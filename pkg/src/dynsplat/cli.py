"""Command line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import sys

from .config import ConfigError, load_config
from .datasets.frames import DatasetError
from .pipeline import EXIT_DATASET, resolve_source, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynsplat")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="process a sequence and write outputs")
    run.add_argument("--config", required=True, help="key=value configuration file")
    run.add_argument(
        "--dataset",
        required=True,
        help="sequence directory, or synthetic:<name> for a procedural scene",
    )
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument(
        "--no-prior-mask",
        action="store_true",
        help="skip the background depth model; use the raw combined mask",
    )
    run.add_argument(
        "--no-adaptive-features",
        action="store_true",
        help="fix the detection threshold at its all-static value",
    )
    run.add_argument("--dump-masks", action="store_true", help="write raw/refined mask PNGs")
    run.add_argument("--dump-features", action="store_true", help="write per-frame features.csv")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATASET
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_prior_mask:
        overrides["use_prior_mask"] = False
    if args.no_adaptive_features:
        overrides["use_adaptive_features"] = False
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    try:
        source = resolve_source(args.dataset, seed=cfg.seed)
        result = run_pipeline(
            cfg,
            source,
            args.out,
            dump_masks=args.dump_masks,
            dump_features=args.dump_features,
        )
    except DatasetError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATASET
    if result.exit_code != 0:
        print(f"error: {result.message}", file=sys.stderr)
    return result.exit_code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
