"""Command line entry point: ``vcrb-lab <subcommand> --config <path> [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, load_config
from .pipeline import (STAGES, MissingArtifact, RunContext, RunLock, RunLocked, StageError, explain_model_file,
                       extract_counts, load_manifest, run_pipeline, run_stage, stage_stats)

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE = 0, 1, 2

logger = logging.getLogger("vcrb_lab")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vcrb-lab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="YAML or JSON run configuration")
    common.add_argument("--seed", type=int, help="override the root seed")
    common.add_argument("--out", help="override the run directory")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    run = sub.add_parser("run", parents=[common], help="run all stages, resuming intact ones")
    run.add_argument("--force", action="store_true", help="rerun every stage")
    for stage in STAGES:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage from cached inputs")
        if stage == "extract":
            p.add_argument("--dry-run", action="store_true", help="print event counts, write nothing")
        if stage == "explain":
            p.add_argument("--model", help="explain a stored model file instead of the run's models")
        if stage == "stats":
            p.add_argument("--metrics", help="metrics table to test instead of train/metrics.tsv")
            p.add_argument("--relatedness", help="relatedness table instead of explain/relatedness.tsv")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return EXIT_VALIDATION
    try:
        if args.command == "run":
            root = run_pipeline(config, force=args.force)
            logger.info("run complete: %s", root)
            return EXIT_OK
        ctx = RunContext(config)
        if args.command == "extract" and args.dry_run:
            for inst, slug, n in extract_counts(ctx):
                print(f"{inst}\t{slug}\t{n}")
            return EXIT_OK
        if args.command not in ("stats", "explain") or not (getattr(args, "model", None) or
                                                            getattr(args, "metrics", None)):
            ctx.instruments()
        with RunLock(ctx.root):
            manifest = load_manifest(ctx.root)
            if args.command == "explain" and args.model:
                run_stage(ctx, "explain", manifest, lambda c: explain_model_file(c, args.model))
            elif args.command == "stats" and (args.metrics or args.relatedness):
                run_stage(ctx, "stats", manifest,
                          lambda c: stage_stats(c, args.metrics, args.relatedness))
            else:
                run_stage(ctx, args.command, manifest)
        return EXIT_OK
    except (ValueError, RunLocked) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except (StageError, MissingArtifact) as exc:
        logger.error("%s", exc)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
