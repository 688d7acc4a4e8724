"""Command-line entry point.

gradalign <fewshot|base2new|domainshift|lambda-sweep|angles|gradcheck>
          [--config FILE] [--out DIR] [--seeds N] [--plot] [--threads N]

Exit codes: 0 success, 1 run failure, 2 config error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, GradalignError
from .harness import (
    cmd_angles,
    cmd_base2new,
    cmd_domainshift,
    cmd_fewshot,
    cmd_gradcheck,
    cmd_lambda_sweep,
    load_config,
)

COMMANDS = {
    "fewshot": cmd_fewshot,
    "base2new": cmd_base2new,
    "domainshift": cmd_domainshift,
    "lambda-sweep": cmd_lambda_sweep,
    "angles": cmd_angles,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradalign", description=__doc__)
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", default=None, help="JSON experiment config (defaults to the command's reference config)")
    parser.add_argument("--out", default=None, help="output directory (default: results/<command>)")
    parser.add_argument("--seeds", type=int, default=None, help="override the number of run seeds")
    parser.add_argument("--plot", action="store_true", help="also write SVG charts")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for independent runs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.command, num_seeds=args.seeds)
        out_dir = args.out if args.out is not None else f"results/{args.command}"
        status = COMMANDS[args.command](cfg, out_dir, threads=args.threads, plot=args.plot)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except GradalignError as exc:
        print(f"run failure: {exc}", file=sys.stderr)
        return 1
    if status == 0:
        print(f"{args.command}: ok, artifacts in {out_dir}")
    else:
        print(f"{args.command}: completed with failures, see {out_dir}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
