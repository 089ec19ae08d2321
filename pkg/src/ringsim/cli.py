"""Command-line entry point.

Usage::

    ringsim simulate --scheme rimr --synthetic uniform,10000,256 --seed 1
    ringsim simulate --trace ops.txt --config run.cfg --report csv --out stats.csv
    ringsim simulate --dump-layout

Exit codes: 0 clean run, 2 integrity violation detected (expected under
attack campaigns), 3 unrecoverable reliability failure.
"""

from __future__ import annotations

import argparse
import sys

from . import codec
from .dram import parse_fault_schedule
from .harness import (
    EXIT_CLEAN,
    SimConfig,
    Simulation,
    generate_trace,
    parse_attacks,
    parse_trace,
)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ringsim")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one trace-driven simulation")
    sim.add_argument("--scheme", choices=("baseline", "ri", "rim", "rimr", "rimre"),
                     help="protection scheme (overrides the config file)")
    src = sim.add_mutually_exclusive_group()
    src.add_argument("--trace", metavar="FILE", help="trace file: 'R <hex>' / 'W <hex>' lines")
    src.add_argument("--synthetic", metavar="KIND,N,FOOTPRINT",
                     help="generate a workload: kind is uniform or zipfian")
    sim.add_argument("--config", metavar="FILE", help="flat 'key = value' config file")
    sim.add_argument("--seed", type=lambda s: int(s, 0), help="master seed (overrides config)")
    sim.add_argument("--faults", metavar="FILE", help="fault schedule file")
    sim.add_argument("--attack", metavar="SPEC",
                     help="attack schedule: kind@access[,kind@access...]; kinds: "
                          "tamper_bit, replay_block, swap_blocks")
    sim.add_argument("--report", choices=("json", "csv"), default="json")
    sim.add_argument("--out", metavar="PATH", help="report destination (default stdout)")
    sim.add_argument("--dump-layout", action="store_true",
                     help="print the bit-layout manifest and exit")
    sim.add_argument("--dump-remap", metavar="PATH",
                     help="write the post-run bucket remap table (diagnostic)")
    return p


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.dump_layout:
        sys.stdout.write(codec.layout_manifest())
        return EXIT_CLEAN

    config = SimConfig.from_file(args.config) if args.config else SimConfig()
    if args.scheme:
        config.scheme = args.scheme
    if args.seed is not None:
        config.seed = args.seed

    if args.trace:
        with open(args.trace) as fh:
            trace = parse_trace(fh.read())
    elif args.synthetic:
        try:
            kind, n, footprint = args.synthetic.split(",")
            trace = generate_trace(kind.strip(), int(n), int(footprint), config.seed)
        except ValueError as e:
            raise SystemExit(f"bad --synthetic spec: {e}")
    else:
        raise SystemExit("one of --trace or --synthetic is required")

    faults = []
    if args.faults:
        with open(args.faults) as fh:
            faults = parse_fault_schedule(fh.read())
    attacks = parse_attacks(args.attack) if args.attack else []

    sim = Simulation(config, trace, faults=faults, attacks=attacks)
    report = sim.run()
    if args.dump_remap:
        with open(args.dump_remap, "w") as fh:
            fh.write("# bucket -> redundant-area slot\n")
            for bucket, slot in sim.controller.remap.entries():
                fh.write(f"{bucket} {slot}\n")
    text = report.to_json() if args.report == "json" else report.to_csv()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return sim.exit_code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "simulate":
        return cmd_simulate(args)
    raise SystemExit(2)


if __name__ == "__main__":
    sys.exit(main())
