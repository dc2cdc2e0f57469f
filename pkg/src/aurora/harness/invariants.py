"""Whole-system invariant checks run by the harness.

These look at the machine with an all-seeing eye (raw domain contents),
which no actor inside the simulation can do.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..platform import PAGE
from ..ssv.supervisor import SCRATCH, SCRATCH_PAGES


def session_key(session) -> bytes | None:
    """Read a live session key straight out of its EPC slot."""
    if session.key_slot is None:
        return None
    epc = session.enclave.epc
    off = session.key_slot * 32
    return bytes(epc.contents[off:off + 32])


@dataclass
class KeyWatch:
    """Remembers every session key seen so scans also cover retired keys."""

    keys: set = field(default_factory=set)

    def learn(self, sessions) -> None:
        for s in sessions:
            key = session_key(s)
            if key and any(key):
                self.keys.add(key)

    def leaks(self, platform) -> list[str]:
        found = []
        for domain in (platform.shared, platform.untrusted):
            for key in self.keys:
                if domain.contents.find(key) >= 0:
                    found.append(f"key {key[:4].hex()}.. in {domain.name}")
        return found


class HygieneMonitor:
    """Independent post-dispatch check of the SSV's scrubbing duties."""

    def __init__(self, machine):
        self.machine = machine
        self.violations: list[tuple[int, str]] = []
        self.dispatches = 0
        machine.ssv.post_dispatch_hooks.append(self._check)

    def _check(self, ssv) -> None:
        self.dispatches += 1
        platform = ssv.platform
        now = platform.now
        if ssv.heap.live:
            self.violations.append((now, "heap live list not empty"))
        scratch = platform.smram.contents[SCRATCH:SCRATCH + SCRATCH_PAGES * PAGE]
        if any(scratch):
            self.violations.append((now, "secrets scratch not zeroed"))

    def all_violations(self) -> list[tuple[int, str]]:
        return sorted(self.violations + list(self.machine.ssv.hygiene_violations))


def conservation(machine, adversary=None) -> tuple[bool, dict]:
    """sealed + injected == opened + dropped + in_flight + removed."""
    ssv = machine.ssv
    sessions = machine.sessions
    sealed = ssv.counters["frames_sealed"] + sum(s.metrics.frames_sealed for s in sessions)
    opened = ssv.counters["frames_accepted"] + sum(s.metrics.frames_opened for s in sessions)
    dropped = (ssv.counters["frames_dropped"]
               + sum(s.metrics.auth_failures + s.metrics.enqueue_failures + s.metrics.discarded
                     for s in sessions))
    in_flight = 0
    for s in sessions:
        if s.state.value != "Closed" and s.fifo_to_ssv is not None:
            in_flight += s.in_flight()
    injected = adversary.injected if adversary is not None else 0
    removed = adversary.removed if adversary is not None else 0
    parts = {"frames_sealed": sealed, "frames_opened": opened, "frames_dropped": dropped,
             "frames_in_flight": in_flight, "frames_injected": injected,
             "frames_removed": removed}
    return sealed + injected == opened + dropped + in_flight + removed, parts
