"""Scenario execution.

Workloads are generators; the runner always resumes the one whose next
action is due earliest (ties by declaration order), idling the platform up
to that instant first.  Time-triggered attack steps are checked before
every action.  Everything is driven by the scenario seed, so a (scenario,
seed) pair always produces the same event log.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import Counter

from ..adversary import Adversary, AttackScript, Outcome
from ..channel.frames import Device, Operation
from ..channel.protocol import STEP_LABELS, RawClockSample
from ..channel.session import Batched
from ..costs import CostTable
from ..devices.clocks import ClockConfig
from ..errors import AuroraError
from ..machine import Machine, MachineConfig
from ..net import SOCK_DGRAM, SOCK_STREAM, StackConfig, World, socket, stack_init
from ..platform import PlatformConfig
from ..time_tss import TimeService
from .invariants import HygieneMonitor, KeyWatch, conservation
from .report import Report
from .scenario import EnclaveSpec, Scenario, load_scenario, resolve

# order in which integrity detections are reported
DETECTION_ORDER = ("AuthFailSsv", "AuthFailEnclave", "ReplayOrReorder", "AuthFail", "TimeAttack",
                   "FifoFull", "EventOverflow")


def build_machine(scenario: Scenario, seed: int) -> Machine:
    m = scenario.machine
    config = MachineConfig(platform=PlatformConfig.from_dict(scenario.platform),
                           clocks=ClockConfig.from_dict(scenario.clocks),
                           costs=CostTable.from_dict(scenario.costs))
    for key, value in m.items():
        setattr(config, key, value)
    return Machine(config, seed=seed)


def classify(detections: set[str]) -> Outcome:
    integrity = sorted(detections - {"Timeout"},
                       key=lambda k: (DETECTION_ORDER.index(k) if k in DETECTION_ORDER
                                      else len(DETECTION_ORDER), k))
    if integrity:
        return Outcome("DetectedAs", integrity[0])
    if "Timeout" in detections:
        return Outcome("DegradedToDoS")
    return Outcome("NoEffect")


def holds(expected: Outcome, detections: set[str], observed: Outcome) -> bool:
    if expected.kind == "DetectedAs":
        return expected.error in detections
    return observed == expected


class _Enclave:
    """Runtime state for one scenario enclave."""

    def __init__(self, spec: EnclaveSpec, index: int):
        self.spec = spec
        self.index = index
        self.enclave = None
        self.session = None
        self.time = None
        self.stack = None
        self.errors: list[str] = []
        self.samples = 0
        self.sample_times: list[int] = []
        self.violation_times: list[int] = []
        self.ops = 0


class Runner:
    def __init__(self, scenario: Scenario, seed: int | None = None,
                 attacks: list[AttackScript] | None = None):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.machine = build_machine(scenario, self.seed)
        self.platform = self.machine.platform
        self.rng = random.Random(f"runner:{self.seed}")
        self.adversary = Adversary(self.machine)
        self.attacks = list(attacks or [])
        for ref in scenario.attacks:
            self.attacks.append(AttackScript.from_dict(resolve("attacks", ref)))
        for script in self.attacks:
            self.adversary.arm(script)
        self.hygiene = HygieneMonitor(self.machine)
        self.keys = KeyWatch()
        self.key_leaks: list[str] = []
        self.enclaves = [_Enclave(spec, i) for i, spec in enumerate(scenario.enclaves)]
        self.by_name = {e.spec.name: e for e in self.enclaves}
        self.world: World | None = None
        self.errors: list[str] = []

    # -- setup -----------------------------------------------------------------------

    def _setup(self) -> None:
        machine = self.machine
        for rt in self.enclaves:
            rt.enclave = machine.create_enclave(register=rt.spec.register)
        net_index = 0
        for rt in self.enclaves:
            self.adversary.tick()
            try:
                rt.session = machine.open_session(rt.enclave)
            except AuroraError as exc:
                rt.errors.append(exc.kind)
                continue
            if rt.spec.workload in ("time",):
                rt.time = TimeService(rt.session)
            if rt.spec.networked:
                net_index += 1
                ip = rt.spec.ipv4 or f"10.0.0.{net_index}"
                try:
                    rt.stack = stack_init(rt.session, StackConfig(ipv4=ip))
                except AuroraError as exc:
                    rt.errors.append(exc.kind)
                    continue
                if self.world is None:
                    self.world = World()
                self.world.add(rt.stack)
        self.keys.learn(machine.sessions)
        self._scan_keys()

    def _scan_keys(self) -> None:
        self.key_leaks.extend(self.keys.leaks(self.platform))

    # -- workloads ---------------------------------------------------------------------

    def _interval(self, spec: EnclaveSpec) -> int:
        if not spec.jitter:
            return spec.interval_ns
        span = int(spec.interval_ns * spec.jitter)
        return max(0, spec.interval_ns + self.rng.randint(-span, span))

    def _workload(self, rt: _Enclave):
        spec = rt.spec
        kind = spec.workload
        if rt.session is None or (spec.networked and rt.stack is None):
            return
        if kind == "idle":
            return
        peer = self.by_name.get(spec.peer) if spec.peer else None
        for i in range(spec.count):
            yield self._interval(spec) if i else spec.start_ns
            try:
                if kind == "time":
                    self._time_op(rt)
                elif kind == "clock_batched":
                    pend = [rt.session.request(Device.CLOCK, Operation.READ, b"",
                                               Batched(spec.batch)) for _ in range(spec.batch)]
                    for p in pend:
                        RawClockSample.unpack(p.result())
                elif kind == "ping":
                    rt.stack.icmp_echo(peer.stack.config.ipv4, bytes(spec.payload_size), 1)
                elif kind == "udp_echo":
                    self._udp_op(rt, peer, i)
                elif kind == "tcp_transfer":
                    self._tcp_op(rt, peer, i)
                rt.ops += 1
            except AuroraError as exc:
                rt.errors.append(exc.kind)

    def _time_op(self, rt: _Enclave) -> None:
        rt.sample_times.append(self.platform.now)
        rt.samples += 1
        _value, verdict = rt.time.now()
        if not verdict.ok:
            rt.violation_times.append(self.platform.now)
            rt.errors.append("TimeAttack")

    def _udp_sockets(self, rt: _Enclave, peer: _Enclave):
        if not hasattr(rt, "udp"):
            rt.udp = socket(rt.stack, SOCK_DGRAM)
            rt.udp.bind(("", 0))
            rt.udp.settimeout(50_000_000)
            if not hasattr(peer, "udp_server"):
                peer.udp_server = socket(peer.stack, SOCK_DGRAM)
                peer.udp_server.bind(("", 7))
                peer.udp_server.settimeout(50_000_000)
        return rt.udp, peer.udp_server

    def _udp_op(self, rt: _Enclave, peer: _Enclave, i: int) -> None:
        client, server = self._udp_sockets(rt, peer)
        payload = self.rng.randbytes(rt.spec.payload_size)
        client.sendto(payload, (peer.stack.config.ipv4, 7))
        data, addr = server.recvfrom(65535)
        server.sendto(data, addr)
        echoed, _ = client.recvfrom(65535)
        if echoed != payload:
            rt.errors.append("Corruption")

    def _tcp_op(self, rt: _Enclave, peer: _Enclave, i: int) -> None:
        port = 5000 + i
        listener = socket(peer.stack, SOCK_STREAM)
        listener.bind(("", port))
        listener.listen()
        client = socket(rt.stack, SOCK_STREAM)
        data = self.rng.randbytes(rt.spec.bytes)
        try:
            client.connect((peer.stack.config.ipv4, port))
            conn, _ = listener.accept()
            client.sendall(data)
            got = conn.recv_exactly(len(data))
            if hashlib.sha256(got).digest() != hashlib.sha256(data).digest():
                rt.errors.append("Corruption")
            client.close()
            conn.close()
        finally:
            listener.close()

    # -- main loop ------------------------------------------------------------------------

    def run(self) -> Report:
        platform = self.platform
        self.adversary.tick()
        self._setup()
        queue = []
        gens = {}
        for rt in self.enclaves:
            gen = self._workload(rt)
            try:
                delay = next(gen)
            except StopIteration:
                continue
            gens[rt.index] = gen
            heapq.heappush(queue, (platform.now + delay, rt.index))
        end = platform.now + self.scenario.duration_ns
        while queue:
            due, index = heapq.heappop(queue)
            if due > end:
                break
            self._advance_to(due)
            self.adversary.tick()
            gen = gens[index]
            try:
                delay = gen.send(None)
            except StopIteration:
                continue
            finally:
                self._scan_keys()
                self.keys.learn(self.machine.sessions)
            heapq.heappush(queue, (platform.now + delay, index))
        # let outstanding traffic and late time-triggered steps play out
        if self.world is not None:
            self.world.settle(1000)
        self.adversary.tick()
        self._scan_keys()
        return self._report()

    def _advance_to(self, t: int) -> None:
        platform = self.platform
        platform.exit_enclave()
        while platform.now < t:
            if self.world is not None:
                if self.world.step():
                    continue
            else:
                self.machine.host.service_interrupts()
            if platform.now < t:
                platform.advance(t - platform.now if self.world is None
                                 else min(t - platform.now, platform.costs.idle_step * 10),
                                 "workload_wait")

    # -- reporting -------------------------------------------------------------------------

    def detections(self) -> set[str]:
        found = set()
        for rt in self.enclaves:
            found.update(e for e in rt.errors if e != "Corruption")
        for s in self.machine.sessions:
            found.update(s.metrics.errors)
        for key, n in self.machine.ssv.counters.items():
            if key.startswith("drop_") and n:
                found.add(key[5:])
        found.update(self.adversary.detections)
        return found

    def _time_latency(self) -> int | None:
        """Samples taken after the first clock tamper until a violation, inclusive."""
        tampered = [t for t, a in self.adversary.actions_done if a == "clock_tamper"]
        if not tampered:
            return None
        t0 = tampered[0]
        best = None
        for rt in self.enclaves:
            after = [t for t in rt.sample_times if t >= t0]
            hits = [t for t in rt.violation_times if t >= t0]
            if hits:
                n = sum(1 for t in after if t <= hits[0])
                best = n if best is None else min(best, n)
        return best

    def _report(self) -> Report:
        machine = self.machine
        report = Report(name=self.scenario.name, seed=self.seed)
        report.breakdown, report.workflow = workflow_breakdown(machine.platform.tracer)
        detections = self.detections()
        observed = classify(detections)
        latency = self._time_latency()
        for script in self.attacks:
            ok = holds(script.expected, detections, observed)
            if script.expected.error == "TimeAttack":
                ok = ok and latency is not None and latency <= 2
            report.verdicts[script.name] = {
                "expected": str(script.expected), "observed": str(observed), "holds": ok,
                "detections": sorted(detections), "latency_samples": latency}
        balanced, parts = conservation(machine, self.adversary)
        hygiene = self.hygiene.all_violations()
        report.invariants = {
            "key_scan": {"ok": not self.key_leaks,
                         "detail": "; ".join(sorted(set(self.key_leaks))) or "no key bytes found"},
            "ssv_hygiene": {"ok": not hygiene,
                            "detail": f"{len(hygiene)} violations in "
                                      f"{self.hygiene.dispatches} dispatches"},
            "counter_conservation": {"ok": balanced, "detail": _fmt_parts(parts)},
            "workflow": {"ok": report.workflow["completed"] == report.workflow["conforming"],
                         "detail": f"{report.workflow['conforming']}/"
                                   f"{report.workflow['completed']} traces conform"},
        }
        counters = Counter()
        counters["smis"] = machine.platform.smi_count
        counters["faults"] = len(machine.platform.faults)
        counters["detections"] = len(detections)
        counters["os_rx_frames"] = len(machine.host.os_rx)
        counters.update(parts)
        for key in ("frames_accepted", "rx_delivered", "events_sealed", "dispatches"):
            counters[f"ssv_{key}"] = machine.ssv.counters[key]
        for key, n in machine.ssv.counters.items():
            if key.startswith("drop_"):
                counters[f"ssv_{key}"] = n
        for rt in self.enclaves:
            counters[f"{rt.spec.name}.ops"] = rt.ops
            counters[f"{rt.spec.name}.errors"] = len(rt.errors)
        report.counters = dict(counters)
        for rt in self.enclaves:
            report.errors.extend(f"{rt.spec.name}: {e}" for e in rt.errors)
        report.event_log_digest = event_log_digest(machine.platform)
        return report


def _fmt_parts(parts: dict) -> str:
    p = parts
    return (f"sealed {p['frames_sealed']} + injected {p['frames_injected']} = opened "
            f"{p['frames_opened']} + dropped {p['frames_dropped']} + in flight "
            f"{p['frames_in_flight']} + removed {p['frames_removed']}")


def event_log_digest(platform) -> str:
    h = hashlib.sha256()
    for entry in platform.event_log:
        h.update(repr(entry).encode())
    return h.hexdigest()


def workflow_breakdown(tracer) -> tuple[list[dict], dict]:
    """Per-step means over completed request traces, and a conformance tally."""
    totals = [0] * 11
    labels: list[Counter] = [Counter() for _ in range(11)]
    completed = conforming = incomplete = 0
    for key in tracer.records:
        trace = tracer.trace(key)
        steps = [r.step for r in trace]
        if 11 not in steps:
            incomplete += 1
            continue
        completed += 1
        expected = list(range(1, 12))
        names_ok = all(r.label == STEP_LABELS[r.step - 1] or r.step == 6 for r in trace)
        if steps == expected and names_ok:
            conforming += 1
        for r in trace:
            totals[r.step - 1] += r.duration
            labels[r.step - 1][r.label] += 1
    rows = []
    if completed:
        for i in range(11):
            label = labels[i].most_common(1)[0][0] if labels[i] else STEP_LABELS[i]
            rows.append({"step": i + 1, "label": label, "count": completed,
                         "total_ns": totals[i], "mean_ns": totals[i] // completed})
    return rows, {"completed": completed, "conforming": conforming, "incomplete": incomplete}


def run(scenario: Scenario | str, seed: int | None = None) -> Report:
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    return Runner(scenario, seed).run()


def run_attack(script: AttackScript | str, seed: int = 0) -> Report:
    """Run one attack script against its base scenario."""
    if isinstance(script, str):
        script = AttackScript.from_dict(resolve("attacks", script))
    scenario = load_scenario(script.scenario)
    report = Runner(scenario, seed, attacks=[script]).run()
    report.name = f"{script.name}@{scenario.name}"
    return report

