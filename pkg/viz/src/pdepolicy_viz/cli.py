"""``viz <kind> --in ... --out ...`` command-line entry point."""

from __future__ import annotations

import argparse
import sys

from pdepolicy_viz import io, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viz", description="Render pdepolicy experiment outputs to images."
    )
    sub = parser.add_subparsers(dest="kind", required=True)

    p = sub.add_parser("loss-curve", help="validation objective vs PDE solves")
    p.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="validation CSV files (one series each)")
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="validation objective during training")

    p = sub.add_parser("solves-bar", help="solves needed per target objective")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--threshold", type=float, action="append", required=True,
                   help="target objective (repeatable)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("subopt", help="objective gap to the baseline")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--baseline", required=True, help="baseline cache CSV")
    p.add_argument("--out", required=True)

    p = sub.add_parser("episode-frames", help="concentration heatmap sequence")
    p.add_argument("--in", dest="inputs", nargs=1, required=True,
                   help="snapshot binary file")
    p.add_argument("--episode-csv", help="overlay the sink position from this dump")
    p.add_argument("--max-frames", type=int, default=8)
    p.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.kind == "loss-curve":
            render.loss_curve(args.inputs, args.out, title=args.title)
        elif args.kind == "solves-bar":
            render.solves_bar(args.inputs, args.threshold, args.out)
        elif args.kind == "subopt":
            render.suboptimality(args.inputs, args.baseline, args.out)
        elif args.kind == "episode-frames":
            render.episode_frames(args.inputs[0], args.out,
                                  episode_csv=args.episode_csv,
                                  max_frames=args.max_frames)
    except io.SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return 2
    print(args.out)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
