"""Command line entry points: run, sweep, trace-dump."""

from __future__ import annotations

import argparse
import sys

from .harness import (
    format_trace,
    load_config,
    read_trace,
    run,
    summary_table,
    sweep,
)
from .types import ConfigError, InfeasibleScheduleError


def _csv_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="encmerge",
        description="In-encoder token merging runs and measurement reports.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one configured run")
    p_run.add_argument("--config", required=True, help="path to a config file")
    p_run.add_argument("--out", default="runs", help="output directory (default: runs)")

    p_sweep = sub.add_parser("sweep", help="grid of strategies x retained budgets")
    p_sweep.add_argument("--config", required=True, help="base config file")
    p_sweep.add_argument(
        "--strategies", required=True, help="comma list, e.g. mean,skip,first:13"
    )
    p_sweep.add_argument(
        "--budgets", required=True, help="comma list of retained token counts"
    )
    p_sweep.add_argument("--out", default="runs", help="output directory (default: runs)")

    p_dump = sub.add_parser("trace-dump", help="pretty-print a trace file")
    p_dump.add_argument("path", help="trace .jsonl file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            report = run(args.config, args.out)
            print(summary_table([report]))
            print(f"trace: {report.trace_path}")
        elif args.command == "sweep":
            cfg, options = load_config(args.config)
            budgets = [int(b) for b in _csv_list(args.budgets)]
            reports = sweep(_csv_list(args.strategies), budgets, cfg, options, args.out)
            print(summary_table(reports))
        else:
            print(format_trace(read_trace(args.path)))
    except (ConfigError, InfeasibleScheduleError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
