"""Command line entry point.

    aurora run <scenario> [--seed N] [--json] [--pcap FILE]
    aurora bench time|net|overhead [options] [--json]
    aurora attack <script> [--seed N] [--json]
    aurora list-scenarios

Exit status is 0 iff every expected outcome and invariant held.
"""

from __future__ import annotations

import argparse
import sys

from ..errors import AuroraError
from . import bench
from .report import emit
from .runner import Runner, run_attack
from .scenario import load_scenario, shipped


def _ints(text: str) -> list[int]:
    return [int(float(x)) for x in text.split(",") if x]


def _intervals(text: str) -> list[float]:
    return [float("inf") if x == "inf" else int(float(x)) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aurora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file or shipped scenario")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true")
    p.add_argument("--pcap", help="write the fabric capture to this file")

    p = sub.add_parser("bench", help="run a benchmark")
    p.add_argument("which", choices=["time", "net", "overhead"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.add_argument("--n", type=int, default=200, help="time: number of requests")
    p.add_argument("--interval-ns", type=int, default=1_000_000, help="time: request spacing")
    p.add_argument("--sizes", type=_ints, default=list(bench.DEFAULT_SIZES),
                   help="net: comma separated payload sizes")
    p.add_argument("--count", type=int, default=3, help="net: probes per size")
    p.add_argument("--intervals", type=_intervals, default=list(bench.DEFAULT_INTERVALS),
                   help="overhead: comma separated intervals in ns ('inf' allowed)")
    p.add_argument("--durations", type=_ints, default=list(bench.DEFAULT_DURATIONS),
                   help="overhead: comma separated SMM dwell times in ns")
    p.add_argument("--work-ns", type=int, default=1_000_000_000,
                   help="overhead: foreground work per cell")

    p = sub.add_parser("attack", help="run an attack script against its base scenario")
    p.add_argument("script")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")

    sub.add_parser("list-scenarios", help="list shipped scenarios and attack scripts")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = sys.stdout.buffer
    try:
        if args.command == "list-scenarios":
            out.write(b"scenarios:\n")
            for name in shipped("scenarios"):
                out.write(f"  {name}\n".encode())
            out.write(b"attacks:\n")
            for name in shipped("attacks"):
                out.write(f"  {name}\n".encode())
            return 0
        if args.command == "run":
            runner = Runner(load_scenario(args.scenario), args.seed)
            report = runner.run()
            if args.pcap:
                runner.machine.fabric.export_pcap(args.pcap)
        elif args.command == "attack":
            report = run_attack(args.script, args.seed)
        else:
            if args.which == "time":
                report = bench.bench_time(args.n, args.interval_ns, seed=args.seed)
            elif args.which == "net":
                report = bench.bench_net(args.sizes, args.count, seed=args.seed)
            else:
                report = bench.bench_overhead(args.intervals, args.durations,
                                              work_ns=args.work_ns, seed=args.seed)
    except AuroraError as exc:
        sys.stderr.write(f"aurora: {exc.kind}: {exc}\n")
        return 2
    out.write(emit(report, "json" if args.json else "table"))
    out.flush()
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
