"""Command-line entry point: ``lapstrat <stage> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .config import ConfigError, load
from .ingest import ParseError, ValidationError
from .pipeline import STAGES, PipelineError, run_all, run_stage

HELP = {
    "synth": "write a synthetic dataset (sector times, track, reference, vehicle)",
    "ingest": "parse sector times and drop outlier laps",
    "stats": "free sector-time distributions and overtaking probabilities",
    "optimize": "GA strategy set over the KERS-ban layouts",
    "simulate": "initial grid and seeded Monte Carlo batch",
    "evaluate": "expected traffic loss per strategy, winner report",
    "stint": "multi-lap re-optimization and cumulative gain",
    "run": "every stage in order",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="base seed for stochastic stages")
    common.add_argument("--out", help="output directory (default: run)")
    common.add_argument("--jobs", type=int, help="worker processes for evaluation")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. simulate.n_sims=200 (YAML value syntax)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="lapstrat", parents=[common],
                                     description="Hybrid race-car energy strategies under traffic.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run"):
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def _overrides(args) -> dict:
    import yaml

    over = {"seed": args.seed, "out": args.out, "jobs": args.jobs}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        over[key.strip()] = yaml.safe_load(value)
    return over


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load(args.config, _overrides(args))
        if args.command == "run":
            print(run_all(cfg), end="")
        else:
            run_stage(args.command, cfg)
            if args.command == "evaluate":
                from pathlib import Path
                print((Path(cfg.out) / "evaluate" / "report.txt").read_text(), end="")
    except (ConfigError, PipelineError, ParseError, ValidationError) as exc:
        print(f"lapstrat: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
