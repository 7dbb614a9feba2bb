"""Command line front end: one subcommand per pipeline stage, plus `all`."""
from __future__ import annotations

import argparse
import sys

from core import __version__
from core.config_manager import ExperimentConfig
from core.errors import DataError, NumericalError, SmrError
from core.logger import logger
from core.pipeline import STAGES, SYNTHETIC_SEQUENCE, Pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smrecovery",
        description="MPI system matrix recovery: simulate or ingest, subsample, recover, reconstruct, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="TOML experiment configuration")
    parser.add_argument("--seed", type=int, help="override the experiment seed")
    parser.add_argument("--jobs", type=int, help="worker threads for per-component stages")
    parser.add_argument("--force", action="store_true", help="re-run stages already recorded as done")
    parser.add_argument("--out", help="root directory for run directories")
    parser.add_argument("command", choices=STAGES + ("all",),
                        help="stage to run; 'all' runs the synthetic sequence " + " -> ".join(SYNTHETIC_SEQUENCE))
    return parser


def _overrides(args) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.jobs is not None:
        out["jobs"] = args.jobs
    if args.out:
        out["paths"] = {"out": args.out}
    return out


def _error_line(code: str, stage: str, message: str) -> str:
    message = " ".join(str(message).split())
    return f"error code={code} stage={stage} message={message}"


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logger.info(f"Command | {args.command} config={args.config}")
    stage = "config"
    pipeline = None
    try:
        config = ExperimentConfig(args.config, _overrides(args))
        pipeline = Pipeline(config, force=args.force)
        if args.command == "all":
            pipeline.run_all()
        else:
            pipeline.run(args.command)
    except SmrError as e:
        stage = getattr(e, "stage", None) or (pipeline.current_stage if pipeline else None) or stage
        print(_error_line(e.code, stage, e), file=sys.stderr)
        return e.exit_status
    except ArithmeticError as e:
        stage = (pipeline.current_stage if pipeline else None) or stage
        print(_error_line(NumericalError.code, stage, e), file=sys.stderr)
        return NumericalError.exit_status
    except OSError as e:
        logger.exception("I/O failure")
        stage = (pipeline.current_stage if pipeline else None) or stage
        print(_error_line(DataError.code, stage, e), file=sys.stderr)
        return DataError.exit_status
    logger.info(f"Finished | command={args.command} run_dir={pipeline.run_dir}")
    return 0
