import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from src.config import config
from src.dependencies import get_experiment_service
from src.services.experiment_service import ConfigError


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="wlry", description="Weighted-L2 Navier-Stokes experiment runner.")
    parser.add_argument("--log-level", default=config.harness.log_level,
                        help=f"Logging level (default: {config.harness.log_level})")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="Run one or more experiment configs")
    run.add_argument("configs", nargs="+", type=Path, help="JSON experiment configs")
    run.add_argument("--jobs", type=int, default=config.harness.jobs,
                     help=f"Experiments run in parallel (default: {config.harness.jobs})")
    run.add_argument("--output-root", type=Path, default=None,
                     help="Output root for configs without output_dir (default: WLRY_OUTPUT_ROOT)")

    verify = commands.add_parser("verify", help="Re-check the slacks of a ledger CSV")
    verify.add_argument("ledger", type=Path)

    info = commands.add_parser("info", help="Print a snapshot header")
    info.add_argument("snapshot", type=Path)
    return parser.parse_args(argv)


def _run(args: argparse.Namespace) -> int:
    service = get_experiment_service()
    try:
        configs = [service.load_config(path) for path in args.configs]
    except (ConfigError, RuntimeError) as err:
        print(f"[error] {err}")
        return 2
    if args.output_root is not None:
        configs = [
            cfg if cfg.output_dir
            else cfg.model_copy(update={"output_dir": str(args.output_root / cfg.experiment.value)})
            for cfg in configs
        ]

    reports = service.run_many(configs, args.jobs)
    status = 0
    for report in reports:
        failed: List[str] = [check.name for check in report.checks if not check.passed]
        if failed:
            print(f"[{report.experiment.value}] FAIL {report.output_dir}: {', '.join(failed)}")
            status = 1
        else:
            print(f"[{report.experiment.value}] OK {report.output_dir} ({len(report.checks)} checks)")
    return status


def _verify(args: argparse.Namespace) -> int:
    try:
        result = get_experiment_service().verify_ledger(args.ledger)
    except (ValueError, RuntimeError) as err:
        print(f"[error] {err}")
        return 2
    if not result.passed:
        print(f"[verify] FAIL {result.path} ({len(result.failures)} failures)")
        for failure in result.failures:
            print(f"  - {failure}")
        return 1
    print(f"[verify] OK {result.path} (rows={result.rows})")
    return 0


def _info(args: argparse.Namespace) -> int:
    try:
        header = get_experiment_service().snapshot_info(args.snapshot)
    except (ValueError, RuntimeError) as err:
        print(f"[error] {err}")
        return 2
    print(header.model_dump_json(indent=2))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    handlers = {"run": _run, "verify": _verify, "info": _info}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
