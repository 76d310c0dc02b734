"""Command line entry point: ``fedcodist run|sweep|gen-data``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..data import write_columnar
from ..errors import FedCodistError, WriteError
from .config import load_config
from .runner import format_metrics, format_summary, prepare_data, run_experiment, sweep, write_metrics


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _cmd_run(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    records = run_experiment(cfg)
    if args.out:
        write_metrics(records, args.out)
    else:
        sys.stdout.write(format_metrics(records))


def _cmd_sweep(args) -> None:
    cfg = load_config(args.config)
    values = [_parse_value(v) for v in args.values.split(",") if v]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    rows = sweep(cfg, args.axis, values, seeds, out_dir=args.out, workers=args.workers)
    sys.stdout.write(format_summary(rows))


def _cmd_gen_data(args) -> None:
    data = prepare_data(load_config(args.config))
    try:
        write_columnar(data, args.out)
    except OSError as exc:
        raise WriteError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedcodist", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="metrics CSV path (default: stdout)")
    run.set_defaults(func=_cmd_run)

    sw = sub.add_parser("sweep", help="grid sweep over one config field")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, help="dotted field name, e.g. schedule.alpha")
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--seeds", required=True, help="comma-separated seeds")
    sw.add_argument("--out", required=True, help="output directory")
    sw.add_argument("--workers", type=int, default=1)
    sw.set_defaults(func=_cmd_sweep)

    gen = sub.add_parser("gen-data", help="export the generated datasets")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=_cmd_gen_data)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        args.func(args)
    except FedCodistError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
