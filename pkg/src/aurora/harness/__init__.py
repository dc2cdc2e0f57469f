"""Scenario runner, benchmarks, invariant checks and reports."""

from .bench import bench_net, bench_overhead, bench_time
from .report import Report, emit, parse
from .runner import Runner, run, run_attack
from .scenario import Scenario, load_scenario

__all__ = ["Report", "Runner", "Scenario", "bench_net", "bench_overhead", "bench_time", "emit",
           "load_scenario", "parse", "run", "run_attack"]
