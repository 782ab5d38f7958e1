"""Command-line entry point: ``ec3 <command> --config run.toml [overrides]``."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from . import __version__, harness
from .errors import ConfigError, DomainError, IngestError, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_BOUND = 4

COMMANDS = ("evaluate", "train", "sweep", "verify-bounds", "synth-gen")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ec3", description="Entropy-constrained conformal correction toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML config file (defaults apply when omitted)")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--seed", type=int)
        p.add_argument("--score", choices=("aps", "raps"))
        p.add_argument("--out", help="output directory")
        p.add_argument("--strict", action="store_true", help="exit 4 when a bound check fails")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, cfg: harness.ExperimentConfig) -> dict:
    if command == "evaluate":
        return harness.cmd_evaluate(cfg)
    if command == "train":
        return harness.cmd_train(cfg, cfg.out)
    if command == "sweep":
        return harness.cmd_sweep(cfg)
    if command == "verify-bounds":
        return harness.cmd_verify_bounds(cfg)
    return harness.cmd_synth_gen(cfg, cfg.out)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("alpha", "beta", "gamma", "seed", "score", "out")}
    try:
        cfg = harness.load_config(args.config, overrides)
        report = run(args.command, cfg)
        files = harness.write_report(report, cfg.out)
    except TrainingError as exc:
        print(f"ec3: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, IngestError, DomainError) as exc:
        print(f"ec3: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"wrote {', '.join(files)} to {cfg.out}")
    if args.strict and report.get("violation"):
        print("ec3: bound check violated", file=sys.stderr)
        return EXIT_BOUND
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
