"""Command-line front end.

Exit codes: 0 success, 2 invalid config (message names the field), 1 runtime
failure (message carries the pipeline phase in brackets).
"""

from __future__ import annotations

import argparse
import math
import sys

from .errors import ConfigError, FedClustError
from .harness import compare_configs, run_from_config_file


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedclust",
        description="Federated-learning simulator with one-shot weight-driven clustering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a config file")
    p_run.add_argument("config", help="path to a YAML experiment config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="output directory (overrides out_dir)")
    p_run.add_argument(
        "--parallel", action="store_true", help="train clients in a thread pool"
    )

    p_cmp = sub.add_parser("compare", help="run several configs and tabulate final accuracy")
    p_cmp.add_argument("configs", nargs="+", help="two or more YAML config paths")
    p_cmp.add_argument(
        "--seeds", type=int, nargs="+", default=None,
        help="seed sweep (default: the shared config seed)",
    )
    p_cmp.add_argument("--out", default=None, help="directory for compare.csv and compare.png")
    p_cmp.add_argument("--parallel", action="store_true")
    return parser


def _fmt(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{value:.4f}"


def _cmd_run(args) -> int:
    report, out_dir = run_from_config_file(
        args.config, seed=args.seed, out=args.out, parallel=args.parallel
    )
    print(f"method: {report.method}")
    print(f"seed: {report.seed}")
    if report.assignment is not None:
        print(f"clusters: {report.assignment.num_clusters}")
    if report.ari is not None:
        print(f"ari_vs_ground_truth: {_fmt(report.ari)}")
    if report.records:
        print(f"final_test_acc_global: {_fmt(report.final_test_acc_global())}")
        print(f"final_test_acc_local: {_fmt(report.final_test_acc_local())}")
    print(f"wall_clock_seconds: {report.wall_clock_seconds:.3f}")
    print(f"wrote: {out_dir}")
    return 0


def _cmd_compare(args) -> int:
    table, _rows = compare_configs(
        args.configs, seeds=args.seeds, out=args.out, parallel=args.parallel
    )
    print(table)
    if args.out:
        print(f"wrote: {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_compare(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FedClustError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
