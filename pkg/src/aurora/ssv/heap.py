"""Boundary-checked secure heap inside SMRAM.

A first-fit allocator over a fixed arena.  Block bookkeeping lives outside
the arena, so the full arena is usable.  Drivers only touch memory through
:class:`Block` handles, and every access is checked against the block.
The supervisor resets the heap before every RSM.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import BoundaryViolation, OutOfMemory
from ..platform import SSV, Platform


@dataclass(eq=False)
class Block:
    heap: "SecureHeap"
    offset: int          # SMRAM offset
    size: int
    live: bool = True

    def _check(self, off: int, n: int, what: str) -> None:
        if not self.live or off < 0 or n < 0 or off + n > self.size:
            self.heap.violations.append((what, self.offset, off, n))
            raise BoundaryViolation(
                f"{what} [{off}:{off + n}] outside block of {self.size} bytes")

    def write(self, off: int, data: bytes) -> None:
        self._check(off, len(data), "write")
        self.heap.platform.write(SSV, self.heap.platform.smram, self.offset + off, data)

    def read(self, off: int = 0, n: int | None = None) -> bytes:
        n = self.size - off if n is None else n
        self._check(off, n, "read")
        return self.heap.platform.read(SSV, self.heap.platform.smram, self.offset + off, n)


class SecureHeap:
    def __init__(self, platform: Platform, arena_offset: int, arena_size: int):
        if arena_offset < 0 or arena_offset + arena_size > platform.smram.size:
            raise ValueError("heap arena must lie strictly inside SMRAM")
        self.platform = platform
        self.arena_offset = arena_offset
        self.arena_size = arena_size
        self.live: list[Block] = []
        self.violations: list[tuple] = []
        self.peak = 0

    def contains(self, block: Block) -> bool:
        return (self.arena_offset <= block.offset
                and block.offset + block.size <= self.arena_offset + self.arena_size)

    def alloc(self, n: int) -> Block:
        if n <= 0:
            raise ValueError("allocation size must be positive")
        cursor = self.arena_offset
        for blk in sorted(self.live, key=lambda b: b.offset):
            if blk.offset - cursor >= n:
                break
            cursor = blk.offset + blk.size
        if cursor + n > self.arena_offset + self.arena_size:
            raise OutOfMemory(f"cannot allocate {n} bytes")
        block = Block(self, cursor, n)
        self.live.append(block)
        self.peak = max(self.peak, sum(b.size for b in self.live))
        return block

    def free(self, block: Block) -> None:
        if block.live:
            self.platform.write(SSV, self.platform.smram, block.offset, bytes(block.size))
            block.live = False
            self.live.remove(block)

    def reset(self) -> None:
        """Free (and scrub) every live block."""
        for block in list(self.live):
            self.free(block)
