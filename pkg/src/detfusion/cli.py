"""Command-line entry point.

Verbs: gen-data, train-detector, extract, calibrate, train-vqa, profile,
attribute, report. Every verb takes --config PATH (JSON), --seed N, and
--out DIR. Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .experiments import ConfigError, run_experiment
from .regions import CalibrationRangeError
from .reporting import emit_report
from .training import TrainingDiverged

TASKS = ("gen-data", "train-detector", "extract", "calibrate", "train-vqa", "profile", "attribute")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def build_parser():
    parser = _Parser(prog="detfusion", description=__doc__)
    sub = parser.add_subparsers(dest="task", required=True)
    for task in TASKS:
        p = sub.add_parser(task)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", type=Path, required=True, help="output directory")
        if task == "train-vqa":
            p.add_argument("--mode", choices=("frozen", "e2e", "gated"), default="frozen")
    report = sub.add_parser("report")
    report.add_argument("runs", nargs="+", type=Path, help="experiment output directories")
    report.add_argument("--out", type=Path, required=True)
    return parser


def _load_config(path):
    if path is None:
        return {}
    if not Path(path).exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 1
    try:
        if args.task == "report":
            emit_report(args.runs, args.out)
            print(f"report written to {args.out}")
            return 0
        cfg = _load_config(args.config)
        mode = getattr(args, "mode", None)
        summary = run_experiment(args.task, cfg, args.seed, args.out, mode=mode)
        print(json.dumps(summary, sort_keys=True))
        return 0
    except CalibrationRangeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, TrainingDiverged, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
