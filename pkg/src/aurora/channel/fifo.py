"""Page-aligned single-producer/single-consumer FIFO in shared RAM.

Layout at ``base`` (a page-aligned offset into SharedRam)::

    page 0   producer index (u64, written only by the producer)
    page 1   consumer index (u64, written only by the consumer)
    page 2.. capacity slots of one sealed frame each

Indices are free-running counters; slot = index % capacity.  Every write to
shared memory is a whole page so observers only ever see 4096-byte writes.
"""

from __future__ import annotations

from ..errors import FifoFull
from ..platform import PAGE, Actor, Platform
from .frames import FRAME_SIZE

_ZERO_TAIL = bytes(PAGE - 8)


class Fifo:
    CONTROL_PAGES = 2

    def __init__(self, platform: Platform, base: int, capacity: int = 32, name: str = ""):
        if base % PAGE:
            raise ValueError("FIFO base must be page aligned")
        self.platform = platform
        self.base = base
        self.capacity = capacity
        self.name = name
        self.domain = platform.shared

    @classmethod
    def footprint(cls, capacity: int) -> int:
        return (capacity + cls.CONTROL_PAGES) * PAGE

    def slot_offset(self, index: int) -> int:
        return self.base + (self.CONTROL_PAGES + index % self.capacity) * PAGE

    def _index(self, actor: Actor, which: int) -> int:
        raw = self.platform.read(actor, self.domain, self.base + which * PAGE, 8)
        return int.from_bytes(raw, "little")

    def _store(self, actor: Actor, which: int, value: int) -> None:
        self.platform.write(actor, self.domain, self.base + which * PAGE,
                            value.to_bytes(8, "little") + _ZERO_TAIL, tag="fifo-index")

    def indices(self, actor: Actor) -> tuple[int, int]:
        return self._index(actor, 0), self._index(actor, 1)

    def pending(self, actor: Actor) -> int:
        prod, cons = self.indices(actor)
        return max(0, prod - cons)

    def enqueue(self, actor: Actor, frame: bytes) -> None:
        if len(frame) != FRAME_SIZE:
            raise ValueError(f"frames are exactly {FRAME_SIZE} bytes")
        prod, cons = self.indices(actor)
        if prod - cons >= self.capacity:
            raise FifoFull(f"{self.name or 'fifo'} holds {self.capacity} frames")
        self.platform.write(actor, self.domain, self.slot_offset(prod), frame, tag="frame")
        self._store(actor, 0, prod + 1)

    def dequeue(self, actor: Actor) -> bytes | None:
        prod, cons = self.indices(actor)
        if prod <= cons:
            return None
        frame = self.platform.read(actor, self.domain, self.slot_offset(cons), FRAME_SIZE)
        self._store(actor, 1, cons + 1)
        return frame

    def peek(self, actor: Actor, position: int = 0) -> bytes | None:
        """Frame ``position`` places behind the consumer, without consuming it."""
        prod, cons = self.indices(actor)
        if cons + position >= prod:
            return None
        return self.platform.read(actor, self.domain, self.slot_offset(cons + position),
                                  FRAME_SIZE)

    def clear(self, actor: Actor) -> None:
        self._store(actor, 0, 0)
        self._store(actor, 1, 0)
