"""Command-line entry point.

Subcommands mirror the pipeline stages:

    foresight gen              --config demo.ini [--force]
    foresight train-quantizer  --config demo.ini
    foresight quantize         --config demo.ini
    foresight train-predictor  --config demo.ini
    foresight train-ranker     --config demo.ini [--arm foresight]
    foresight evaluate         --config demo.ini
    foresight report           --config demo.ini
    foresight score            --config demo.ini CANDIDATES_FILE [--arm NAME]

Exit codes: 0 success, 2 configuration error, 3 integrity (hash/magic)
error, 4 numeric failure (NaN/Inf during training).
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, IntegrityError, NonFiniteError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INTEGRITY = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foresight",
        description="Desk-scale live-stream foresight pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, arm: bool = False,
            candidates: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the config file")
        p.add_argument("--force", action="store_true",
                       help="rerun even when the manifest says up to date")
        p.add_argument("--seed", type=int, default=None,
                       help="override the global seed")
        if arm:
            p.add_argument("--arm", default="foresight",
                           choices=sorted(pipeline.ARM_FLAGS),
                           help="ablation arm (feature flags)")
        if candidates:
            p.add_argument("candidates", help="file of 'user author author ...' lines")
        return p

    add("gen", "generate the synthetic corpus")
    add("train-quantizer", "fit the k-means codebook")
    add("quantize", "map segments to sids and build the author store")
    add("train-predictor", "train the next-sid prediction model")
    add("train-ranker", "train one ranking model arm", arm=True)
    add("evaluate", "run the full ablation and write the report")
    add("report", "re-render the evaluation report")
    add("score", "rank candidate authors for users", arm=True, candidates=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        if args.command == "gen":
            pipeline.cmd_gen(cfg, force=args.force)
        elif args.command == "train-quantizer":
            pipeline.cmd_train_quantizer(cfg, force=args.force)
        elif args.command == "quantize":
            pipeline.cmd_quantize(cfg, force=args.force)
        elif args.command == "train-predictor":
            pipeline.cmd_train_predictor(cfg, force=args.force)
        elif args.command == "train-ranker":
            pipeline.cmd_train_ranker(cfg, force=args.force, arm=args.arm)
        elif args.command == "evaluate":
            pipeline.cmd_evaluate(cfg, force=args.force)
        elif args.command == "report":
            print(pipeline.cmd_report(cfg), end="")
        elif args.command == "score":
            print(pipeline.cmd_score(cfg, args.candidates, arm=args.arm), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
