"""Command-line entry point.

Exit codes: 0 success, 2 configuration/schema error, 3 training divergence.
The SPLITSIM_OUT environment variable sets the root for relative output
paths.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import harness
from .errors import ComparisonError, DivergedError, FormatError, SchemaError, SimulatorError

OUT_ROOT_ENV = "SPLITSIM_OUT"


def _resolve_out(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _cmd_run(args) -> int:
    config = harness.ExperimentConfig.from_file(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.protocol is not None:
        overrides["protocol"] = args.protocol
    if overrides:
        config = config.with_overrides(**overrides)
    out = args.out or f"runs/{config.protocol}-seed{config.seed}"
    report = harness.run(config, _resolve_out(out))
    print(f"wrote {report.out_dir} ({report.summary['rounds_executed']} rounds executed)")
    return 0


def _cmd_compare(args) -> int:
    out = _resolve_out(args.out)
    path = harness.compare(args.run_dirs, out)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splitsim",
        description="Split federated learning simulator with system optimization",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute one experiment from a JSON config")
    run_p.add_argument("config", help="path to the config file")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default=None, help="output directory")
    run_p.add_argument(
        "--protocol", choices=harness.PROTOCOLS, default=None, help="override the protocol"
    )
    run_p.set_defaults(func=_cmd_run)

    cmp_p = sub.add_parser("compare", help="tabulate finished runs side by side")
    cmp_p.add_argument("run_dirs", nargs="+", help="output directories of finished runs")
    cmp_p.add_argument("--out", default="comparison.csv", help="comparison table path")
    cmp_p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, FormatError, ComparisonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SimulatorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
