"""Command line entry point: ``con-sim {gen-world,run,spl}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .harness import METHODS, load_config, read_results_csv, run_experiment, summarize
from .world import SCENARIOS, WorldParams, generate_world, save_world


def _gen_world(args) -> int:
    params = replace(WorldParams(), width=args.width, height=args.height, n_rooms=args.rooms)
    save_world(generate_world(args.seed, params), args.out)
    return 0


def _run(args) -> int:
    cfg = load_config(args.config)
    over = {}
    if args.method:
        over["methods"] = tuple(args.method)
    if args.pe:
        over["pes"] = tuple(args.pe)
    if args.scenario:
        over["scenarios"] = tuple(args.scenario)
    if over:
        cfg = replace(cfg, **over)
    summary, text, _ = run_experiment(cfg)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    for line in summary.lines():
        print(line)
    if summary.failures:
        print(f"{len(summary.failures)} episode(s) failed; see log", file=sys.stderr)
    return 0


def _spl(args) -> int:
    with open(args.inp, newline="", encoding="utf-8") as fh:
        rows = read_results_csv(fh.read())
    summary = summarize(rows)
    for line in summary.lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="con-sim", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-world", help="generate a world and save it as text")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--width", type=int, default=WorldParams.width)
    g.add_argument("--height", type=int, default=WorldParams.height)
    g.add_argument("--rooms", type=int, default=WorldParams.n_rooms)
    g.set_defaults(func=_gen_world)

    r = sub.add_parser("run", help="run an experiment matrix and write a CSV")
    r.add_argument("--config", required=True)
    r.add_argument("--method", action="append", choices=METHODS)
    r.add_argument("--pe", action="append", type=float)
    r.add_argument("--scenario", action="append", choices=SCENARIOS)
    r.add_argument("--out", required=True)
    r.set_defaults(func=_run)

    s = sub.add_parser("spl", help="summarize a results CSV per curve")
    s.add_argument("--in", dest="inp", required=True)
    s.set_defaults(func=_spl)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as err:
        print(f"con-sim: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
