"""Cooperative scheduler for enclave stacks.

Each step lets every host run its interrupt handlers, then gives every
stack one quantum.  An exception inside one stack stops that stack only.
When nothing made progress, virtual time moves on by one idle step so
timers can fire.
"""

from __future__ import annotations

from ..errors import NetTimeout


class World:
    def __init__(self, *stacks):
        self.stacks = []
        self.faults: list[tuple[int, int, Exception]] = []
        self.steps = 0
        for stack in stacks:
            self.add(stack)

    def add(self, stack) -> None:
        """Join a stack; addresses and flow tags of members become static config."""
        stack.world = self
        for other in self.stacks:
            other.arp.setdefault(stack.ipv4, stack.mac)
            other.peer_tags.setdefault(stack.ipv4, stack.flow_tag)
            stack.arp.setdefault(other.ipv4, other.mac)
            stack.peer_tags.setdefault(other.ipv4, other.flow_tag)
        self.stacks.append(stack)

    @property
    def platforms(self) -> list:
        seen = []
        for stack in self.stacks:
            if all(stack.platform is not p for p in seen):
                seen.append(stack.platform)
        return seen

    @property
    def hosts(self) -> list:
        seen = []
        for stack in self.stacks:
            if all(stack.session.host is not h for h in seen):
                seen.append(stack.session.host)
        return seen

    @property
    def now(self) -> int:
        return max(p.now for p in self.platforms)

    def step(self) -> int:
        self.steps += 1
        for host in self.hosts:
            host.platform.exit_enclave()
            host.service_interrupts()
        progress = 0
        for stack in self.stacks:
            if stack.failed is not None:
                continue
            try:
                progress += stack.service()
            except Exception as exc:          # noqa: BLE001 - isolation boundary
                stack.fail(exc)
                self.faults.append((self.now, stack.eid, exc))
        if not progress:
            for platform in self.platforms:
                platform.charge("idle_step")
        return progress

    def run_until(self, predicate, timeout_ns: int) -> None:
        deadline = self.now + timeout_ns
        while not predicate():
            if self.now >= deadline:
                raise NetTimeout(f"condition not met within {timeout_ns} ns")
            self.step()

    def run_for(self, duration_ns: int) -> None:
        deadline = self.now + duration_ns
        while self.now < deadline:
            self.step()

    def settle(self, max_steps: int = 10_000) -> None:
        """Step until a quantum passes with no work."""
        for _ in range(max_steps):
            if not self.step():
                return
