# main.py
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from config import settings
from errors import GPSelectError
from logging_config import setup_logging
from models import ExperimentConfig, GenerateConfig
from run_context import new_run_id
from services.experiments import cmd_compare, cmd_evaluate, cmd_generate, cmd_run, load_config

log = logging.getLogger("cli")

# ----------------------------
# Subcommands
# ----------------------------

def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return n

def _overrides(args: argparse.Namespace, seed_key: str) -> List[str]:
    """--set pairs first, then dedicated flags so they win over both the file and --set."""
    out = list(args.set or [])
    if args.seed is not None:
        out.append(f"{seed_key}={args.seed}")
    if getattr(args, "repetitions", None) is not None:
        out.append(f"repetitions={args.repetitions}")
    return out

def _generate(args: argparse.Namespace) -> int:
    config = load_config(GenerateConfig, args.config, _overrides(args, "generator.seed"))
    out_dir = cmd_generate(config, output=args.output, force=args.force)
    print(out_dir)
    return 0

def _run(args: argparse.Namespace) -> int:
    config = load_config(ExperimentConfig, args.config, _overrides(args, "em.seed"))
    summary = cmd_run(config, output=args.output, force=args.force, resume=args.resume, jobs=args.jobs)
    print(summary.model_dump_json(indent=2))
    return 0

def _evaluate(args: argparse.Namespace) -> int:
    report = cmd_evaluate(args.run_dir, args.dataset_dir, output=args.output)
    print(report.model_dump_json(indent=2))
    return 0

def _compare(args: argparse.Namespace) -> int:
    output = args.output or Path(settings.OUTPUT_ROOT, "comparison")
    report = cmd_compare(args.experiment_dirs, output=output, force=args.force)
    print(f"{output}: {len(report.entries)} experiments compared")
    return 0

# ----------------------------
# Parser
# ----------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpselect",
        description="Truncated EM with GP-based latent preselection: data generation, runs, evaluation.",
    )
    parser.add_argument("--log-level", default=None, type=str.upper,
                        choices=("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"),
                        help=f"logging level (default {settings.log_level})")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, required=True, help="YAML config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. --set em.h_prime=4 (repeatable)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output", type=Path, default=None, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    p = sub.add_parser("generate", help="write a synthetic dataset directory")
    config_args(p)
    p.set_defaults(handler=_generate)

    p = sub.add_parser("run", help="run an experiment (one EM run per repetition)")
    config_args(p)
    p.add_argument("--jobs", type=_positive_int, default=None, help="repetitions run in parallel")
    p.add_argument("--repetitions", type=_positive_int, default=None)
    p.add_argument("--resume", action="store_true", help="continue each repetition from its last checkpoint")
    p.set_defaults(handler=_run)

    p = sub.add_parser("evaluate", help="score a run directory against a dataset's ground truth")
    p.add_argument("run_dir", type=Path)
    p.add_argument("dataset_dir", type=Path)
    p.add_argument("--output", type=Path, default=None, help="report path (default <run_dir>/report.json)")
    p.set_defaults(handler=_evaluate)

    p = sub.add_parser("compare", help="compare experiments run on the same model and dataset")
    p.add_argument("experiment_dirs", type=Path, nargs="+")
    p.add_argument("--output", type=Path, default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=_compare)
    return parser

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level or settings.log_level)
    new_run_id(args.command)
    log.info("Command starting", extra={"command": args.command, "env": settings.APP_ENV})

    try:
        return args.handler(args)
    except GPSelectError as exc:
        log.error("Command failed", extra={"command": args.command, "error": exc.detail, "exit_code": exc.exit_code})
        print(f"error: {exc.detail}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        log.error("I/O failure", extra={"command": args.command, "error": str(exc)})
        print(f"error: {exc}", file=sys.stderr)
        return 1

if __name__ == "__main__":
    sys.exit(main())
