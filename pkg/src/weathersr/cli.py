"""Command-line entry point: ``weathersr train|evaluate|sample``."""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import NumericError, WeatherSRError
from . import harness


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="weathersr", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and validate periodically")
    p.add_argument("--config", required=True, help="YAML file or preset:<name>")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("evaluate", help="score a checkpoint against HR references")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="synthetic:..., netcdf:..., or a config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--out", help="also write the report to this file")

    p = sub.add_parser("sample", help="super-resolve inputs and write fields and maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="synthetic:..., netcdf:..., or lr:PATH[,max=N]")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "train":
            run_dir = harness.cmd_train(args.config, resume=args.resume)
            print(run_dir)
        elif args.command == "evaluate":
            reports = harness.cmd_evaluate(args.checkpoint, args.data, args.seed, args.batch_size)
            text = harness.format_reports(reports)
            print(text, end="")
            if args.out:
                with open(args.out, "w") as fh:
                    fh.write(text)
        else:
            for path in harness.cmd_sample(args.checkpoint, args.input, args.out, args.seed):
                print(path)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (WeatherSRError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
