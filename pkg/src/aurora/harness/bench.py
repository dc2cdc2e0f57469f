"""Benchmarks reproducing the shape of the evaluation: time-service
breakdown, ICMP round trip against payload size, and foreground slowdown
against the trusted-service request interval.  All figures are modeled
virtual time."""

from __future__ import annotations

import math
import statistics

from ..costs import MS, US, CostTable
from ..machine import Machine, MachineConfig
from ..net import StackConfig, World, stack_init
from ..time_tss import TimeService
from .report import Report
from .runner import event_log_digest, workflow_breakdown

DEFAULT_SIZES = (0, 64, 256, 512, 1024, 1400)
DEFAULT_INTERVALS = (1 * MS, 10 * MS, 100 * MS, 1000 * MS)
DEFAULT_DURATIONS = (78 * US, 152 * US)


def _machine(seed: int, costs: CostTable | None = None) -> Machine:
    return Machine(MachineConfig(costs=costs or CostTable()), seed=seed)


def bench_time(n: int = 200, interval_ns: int = 1 * MS, *, seed: int = 0,
               costs: CostTable | None = None) -> Report:
    """Per-step breakdown of n immediate time requests."""
    m = _machine(seed, costs)
    service = TimeService(m.open_session(m.create_enclave()))
    service.probe()
    m.platform.tracer.clear()
    latencies = []
    for _ in range(n):
        m.platform.advance(interval_ns, "idle")
        start = m.platform.now
        service.now()
        latencies.append(m.platform.now - start)
    report = Report(name="bench-time", seed=seed)
    report.breakdown, report.workflow = workflow_breakdown(m.platform.tracer)
    report.counters = {"requests": n, "smis": m.platform.smi_count,
                       "mean_latency_ns": int(statistics.fmean(latencies)) if latencies else 0}
    report.event_log_digest = event_log_digest(m.platform)
    return report


def bench_net(sizes=DEFAULT_SIZES, count: int = 3, *, seed: int = 0,
              costs: CostTable | None = None) -> Report:
    """Mean ICMP echo round trip between two enclave stacks for each payload size."""
    m = _machine(seed, costs)
    a = stack_init(m.open_session(m.create_enclave()), StackConfig(ipv4="10.0.0.1"))
    b = stack_init(m.open_session(m.create_enclave()), StackConfig(ipv4="10.0.0.2"))
    world = World(a, b)
    world.settle()
    points, rows = [], []
    for size in sizes:
        rtts = a.icmp_echo("10.0.0.2", bytes(size), count)
        mean = int(statistics.fmean(rtts))
        points.append([size, mean])
        rows.append([size, count, min(rtts), mean, max(rtts)])
    report = Report(name="bench-net", seed=seed)
    report.series = {"icmp_rtt_ns_vs_payload": points}
    report.tables = {"icmp_rtt": {"columns": ["payload", "probes", "min_ns", "mean_ns",
                                              "max_ns"], "rows": rows}}
    report.counters = {"smis": m.platform.smi_count, "tx_frames": a.stats["tx_frames"],
                       "rx_frames": a.stats["rx_frames"]}
    report.event_log_digest = event_log_digest(m.platform)
    return report


def overhead_ratio(interval_ns: float, dwell_ns: int, *, work_ns: int = 1000 * MS,
                   seed: int = 0, costs: CostTable | None = None) -> tuple[int, float]:
    """Foreground slowdown when a time request preempts it at the end of every
    full interval_ns of foreground work.

    Returns (requests issued, (elapsed - work) / work).
    """
    if math.isinf(interval_ns):
        return 0, 0.0
    costs = CostTable.from_dict((costs or CostTable()).to_dict())
    costs.smm_dwell_floor = dwell_ns
    m = _machine(seed, costs)
    service = TimeService(m.open_session(m.create_enclave()))
    service.probe()
    platform = m.platform
    start = platform.now
    remaining, requests = work_ns, 0
    while remaining > 0:
        chunk = min(remaining, int(interval_ns))
        platform.advance(chunk, "foreground")
        remaining -= chunk
        if chunk == interval_ns:
            service.now()
            requests += 1
    return requests, (platform.now - start - work_ns) / work_ns


def bench_overhead(intervals=DEFAULT_INTERVALS, durations=DEFAULT_DURATIONS, *,
                   work_ns: int = 1000 * MS, seed: int = 0,
                   costs: CostTable | None = None) -> Report:
    rows = []
    series = {}
    for dwell in durations:
        points = []
        for interval in intervals:
            requests, ratio = overhead_ratio(interval, dwell, work_ns=work_ns, seed=seed,
                                             costs=costs)
            label = "inf" if math.isinf(interval) else int(interval)
            rows.append([label, dwell, requests, round(ratio, 9)])
            points.append([label, round(ratio, 9)])
        series[f"overhead_dwell_{dwell}ns"] = points
    report = Report(name="bench-overhead", seed=seed)
    report.tables = {"overhead_vs_interval": {
        "columns": ["interval_ns", "smm_dwell_ns", "requests", "overhead_ratio"], "rows": rows}}
    report.series = series
    return report
