"""Command-line entry point.

Exit codes: 0 success, 2 configuration or data error, 3 missing
prerequisite stage output, 4 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as cfgmod
from .baselines import ConvergenceError
from .config import ConfigError
from .data import DataError
from .eam import EnvError
from .nncore import CheckpointError, NonFiniteError
from .pipeline import STAGES, PrerequisiteError, emit_report, run_pipeline, run_stage
from .reporting import ReportError
from .sam import AccountingError

EXIT_OK, EXIT_CONFIG, EXIT_PREREQ, EXIT_DIVERGED = 0, 2, 3, 4

STAGE_COMMANDS = ("ingest", "synth", "train-eam", "gen-signals", "train-sam", "backtest", "baseline",
                  "compare", "stats", "ablate")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment YAML (defaults when omitted)")
    common.add_argument("--out", type=Path, help="run directory (overrides the config's out)")
    common.add_argument("--seed-override", type=int, help="replace every named seed with this value")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-asset/portfolio work")

    p = argparse.ArgumentParser(prog="mspm", description="Signal agents + portfolio allocator pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    run = sub.add_parser("run", parents=[common], help="run the whole pipeline or selected stages")
    run.add_argument("--stage", action="append", choices=STAGES,
                     help="stage to run (repeatable); all stages in order when omitted")
    sub.add_parser("report", parents=[common], help="rebuild report.json from completed stages")
    sub.add_parser("print-defaults", help="print the default config as YAML")
    return p


def _config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.default_config()
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return cfg


def _dispatch(args) -> int:
    if args.command == "print-defaults":
        sys.stdout.write(cfgmod.dump(cfgmod.default_config()))
        return EXIT_OK
    cfg = _config(args)
    root = Path(args.out) if args.out else Path(cfg.out)
    if args.command == "report":
        report = emit_report(cfg, root)
    elif args.command == "run":
        report = run_pipeline(cfg, root, args.jobs, tuple(args.stage) if args.stage else STAGES)
    else:
        stage = args.command
        if stage == "synth":
            if not all(a.synthetic for a in cfg.assets):
                raise ConfigError("synth needs every asset to have a synthetic regime plan")
            stage = "ingest"
        run_stage(cfg, stage, root, args.jobs)
        report = json.loads((root / "report.json").read_text())
    print(f"{args.command}: status={report['status']} digest={report['digest']} -> {root / 'report.json'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, DataError, EnvError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PrerequisiteError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PREREQ
    except (NonFiniteError, ConvergenceError, AccountingError, FloatingPointError) as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
