"""Command-line entry point: ``weakguide <subcommand> [options]``.

Writes ``results.csv`` (long format, one number per row), ``records.jsonl``
(one record per sampled cell) and ``summary.txt`` into ``--out``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import traceback
from pathlib import Path

from weakguide.config import ConfigError, load_config
from weakguide.experiments import CSV_COLUMNS, record_dicts, run_experiment, summarize

SUBCOMMANDS = ("mode-test", "sweep-cfg", "sweep-cads", "sweep-swap", "debias", "compliance", "validate-world")
# which config list --grid replaces for each subcommand
GRID_TARGET = {
    "mode-test": ("mode_test", "depths"),
    "sweep-cfg": ("sweep_cfg", "grid"),
    "sweep-cads": ("sweep_cads", "grid"),
    "sweep-swap": ("sweep_swap", "grid"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="weakguide", description="Guidance and de-biasing experiments on a Gaussian-mixture world.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)
    sub.required = True
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None, help="TOML config (defaults are built in)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: runs/<subcommand>)")
        p.add_argument("--workers", type=int, default=1, help="worker processes (results do not depend on it)")
        p.add_argument("--n", type=int, default=None, help="chains per cell override")
        if name in GRID_TARGET:
            hint = "s:tau1 pairs, e.g. 0:0.6,0.25:0.6" if name == "sweep-cads" else "comma-separated values"
            p.add_argument("--grid", default=None, help=f"grid override ({hint})")
    return parser


def parse_grid(kind: str, text: str) -> list:
    try:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if kind == "sweep-cads":
            grid = [[float(a) for a in item.split(":")] for item in items]
            if any(len(cell) != 2 for cell in grid):
                raise ValueError
        else:
            grid = [float(item) for item in items]
    except ValueError:
        raise ConfigError(f"--grid: cannot parse {text!r}") from None
    if not grid:
        raise ConfigError("--grid: empty grid")
    return grid


def write_outputs(out: Path, result, config) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in result.rows:
            w.writerow(row.as_csv())
    with open(out / "records.jsonl", "w") as fh:
        for rec in record_dicts(result, config, config.world):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "summary.txt").write_text(summarize(result))


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    try:
        config = load_config(args.config)
        if args.workers < 1:
            raise ConfigError("--workers: must be >= 1")
        if args.n is not None and args.n < 1:
            raise ConfigError("--n: must be >= 1")
        grid = None
        if getattr(args, "grid", None) is not None:
            section, key = GRID_TARGET[args.command]
            grid = (section, key, parse_grid(args.command, args.grid))
        config = config.with_overrides(seed=args.seed, n=args.n, grid=grid)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = args.out or Path("runs") / args.command
    try:
        result = run_experiment(args.command, config, workers=args.workers)
        write_outputs(out, result, config)
    except Exception as exc:  # runtime failure: report and signal with exit code 2
        traceback.print_exc()
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(summarize(result))
    if args.command == "validate-world" and not all(ok for _, ok, _ in result.checks):
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
