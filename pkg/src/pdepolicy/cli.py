"""Command-line harness.

Subcommands: ``train`` (hjb/ppo/td3), ``baseline``, ``evaluate``,
``compare``, ``dump-episode``.  Configuration comes from an optional YAML
file plus ``--set section.key=value`` overrides; every run writes its
resolved configuration next to its results.  Exit codes: 0 success, 2
configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from pdepolicy import runner
from pdepolicy.config import ExperimentConfig, apply_overrides, load_config

WORKERS_ENV_VAR = "PDEPOLICY_WORKERS"


def _add_config_args(parser: argparse.ArgumentParser, include_out: bool = True) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--setup", choices=["horizontal", "sinusoidal"])
    parser.add_argument("--grid", type=int, help="nodes per side")
    parser.add_argument("--seed", type=int)
    if include_out:
        parser.add_argument("--out", help="output directory")
    parser.add_argument("--validation-small", action="store_true",
                        help="use the 6-problem sinusoidal subset")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override any config field")


def _build_config(args, method: str | None = None) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = []
    if method is not None:
        overrides.append(f"method={method}")
    if args.setup:
        overrides.append(f"setup={args.setup}")
    if args.grid:
        overrides.append(f"env.grid_n={args.grid}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"out_dir={args.out}")
    if args.validation_small:
        overrides.append("validation_small=true")
    overrides += args.overrides
    cfg = apply_overrides(cfg, overrides)
    workers = os.environ.get(WORKERS_ENV_VAR)
    if workers:
        cfg = apply_overrides(
            cfg, [f"hjb.workers={int(workers)}", f"rl.workers={int(workers)}"]
        )
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pdepolicy",
        description="Train and compare feedback policies for the "
                    "advection-diffusion control problem.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training method")
    p_train.add_argument("--method", choices=["hjb", "ppo", "td3"], default="hjb")
    _add_config_args(p_train)

    p_base = sub.add_parser("baseline", help="solve the validation set by L-BFGS")
    _add_config_args(p_base)

    p_eval = sub.add_parser("evaluate", help="re-score a finished run")
    p_eval.add_argument("run_dir")
    p_eval.add_argument("--out", help="write the result JSON here")

    p_cmp = sub.add_parser("compare", help="tabulate runs against thresholds")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--baseline-dir", help="directory holding baseline.csv")
    p_cmp.add_argument("--threshold", type=float, action="append", default=[],
                       help="objective threshold (repeatable)")
    p_cmp.add_argument("--out", required=True, help="comparison CSV path")

    p_dump = sub.add_parser("dump-episode", help="dump one episode + snapshots")
    p_dump.add_argument("--run-dir", help="finished run to take the policy from "
                        "(omit for the zero policy)")
    p_dump.add_argument("--problem-index", type=int, default=0)
    p_dump.add_argument("--out", required=True, help="output directory")
    _add_config_args(p_dump, include_out=False)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "train":
            cfg = _build_config(args, method=args.method)
        elif args.command == "baseline":
            cfg = _build_config(args, method="baseline")
        elif args.command == "dump-episode":
            cfg = _build_config(args)
        else:
            cfg = None
    except (ValueError, OSError, KeyError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    try:
        if args.command == "train":
            summary = runner.run_experiment(cfg)
        elif args.command == "baseline":
            summary = runner.run_baseline(cfg)
        elif args.command == "evaluate":
            summary = runner.run_evaluate(args.run_dir, args.out)
        elif args.command == "compare":
            table = runner.run_compare(args.run_dirs, args.out,
                                       thresholds=args.threshold or None,
                                       baseline_dir=args.baseline_dir)
            summary = {"rows": len(table), "out": args.out}
        elif args.command == "dump-episode":
            summary = runner.run_dump_episode(args.run_dir, cfg,
                                              args.problem_index, args.out)
        else:  # pragma: no cover
            raise AssertionError(args.command)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
