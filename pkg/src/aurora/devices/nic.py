"""Descriptor-ring NIC and the virtual network fabric.

The adapter is modeled abstractly after a PCnet-style part: TX and RX rings
of ownership-flagged descriptors, a ring counter latched into the control
registers when the device is stopped, a promiscuous flag and an interrupt
enable.  Exact register layouts are not reproduced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from ..errors import FaultKind, FrameTooLarge, RingFull

MAX_FRAME = 1518
BROADCAST = b"\xff" * 6

DEVICE = "Device"
HOST = "Host"


@dataclass
class Descriptor:
    own: str
    length: int = 0
    buffer: bytearray = field(default_factory=lambda: bytearray(MAX_FRAME))
    arrival: int = 0

    def frame(self) -> bytes:
        return bytes(self.buffer[:self.length])


class DescriptorRing:
    def __init__(self, ring_len: int = 16, initial_own: str = HOST):
        self.ring_len = ring_len
        self.slots = [Descriptor(initial_own) for _ in range(ring_len)]
        self.head = 0

    def owned_by(self, owner: str) -> int:
        return sum(1 for s in self.slots if s.own == owner)

    def advance(self) -> None:
        self.head = (self.head + 1) % self.ring_len


class Nic:
    def __init__(self, platform, mac: bytes, *, vector: int = 0x2B, ring_len: int = 16,
                 mmio_base: int = 0xFEB0_0000, promiscuous: bool = False):
        self.platform = platform
        self.mac = bytes(mac)
        self.vector = vector
        self.mmio_base = mmio_base
        self.tx = DescriptorRing(ring_len, HOST)
        self.rx = DescriptorRing(ring_len, DEVICE)
        self.tx_tail = 0
        self.control_regs = {
            "run": 1,
            "intr_enable": 1,
            "promiscuous": int(promiscuous),
            "ring_counter": 0,
        }
        self.status = {"tint": 0, "rint": 0}
        self.link: Fabric | None = None
        self.stats = {"tx": 0, "rx": 0, "rx_overflow": 0, "rx_filtered": 0}
        self._arrivals = 0

    # -- registers ------------------------------------------------------------

    def snapshot(self) -> tuple:
        return tuple(sorted(self.control_regs.items()))

    def restore(self, snap: tuple) -> None:
        self.control_regs.clear()
        self.control_regs.update(dict(snap))

    def suspend(self) -> int:
        """Stop the device; the current TX ring position is latched."""
        self.control_regs["run"] = 0
        self.control_regs["ring_counter"] = self.tx.head
        return self.control_regs["ring_counter"]

    # -- transmit -----------------------------------------------------------------

    def fill_tx(self, frame: bytes, index: int | None = None) -> int:
        if len(frame) > MAX_FRAME:
            raise FrameTooLarge(f"{len(frame)} > {MAX_FRAME}")
        ring = self.tx
        index = ring.head if index is None else index
        slot = ring.slots[index]
        # one descriptor always stays free so full and empty are distinguishable
        if slot.own != HOST or ring.owned_by(DEVICE) >= ring.ring_len - 1:
            raise RingFull("no host-owned TX descriptor")
        slot.buffer[:len(frame)] = frame
        slot.length = len(frame)
        slot.own = DEVICE
        ring.head = (index + 1) % ring.ring_len
        return index

    def kick(self) -> int:
        """Transmit demand: send every device-owned TX descriptor in order."""
        if not self.control_regs["run"]:
            return 0
        sent = 0
        ring = self.tx
        while ring.slots[self.tx_tail].own == DEVICE:
            slot = ring.slots[self.tx_tail]
            frame = slot.frame()
            self.platform.advance(self.platform.costs.wire_ns_per_byte * len(frame), "wire")
            slot.own = HOST
            self.tx_tail = (self.tx_tail + 1) % ring.ring_len
            self.stats["tx"] += 1
            sent += 1
            if self.link is not None:
                self.link.transmit(self, frame)
        if sent:
            self.status["tint"] = 1
            if self.control_regs["intr_enable"]:
                self.platform.raise_interrupt(self.vector, "tx")
        return sent

    def nic_tx(self, frame: bytes) -> int:
        index = self.fill_tx(frame)
        self.kick()
        return index

    # -- receive -------------------------------------------------------------------

    def accepts(self, frame: bytes) -> bool:
        dst = frame[:6]
        # broadcast and multicast both have the group bit set
        return bool(self.control_regs["promiscuous"] or dst == self.mac
                    or (dst and dst[0] & 1))

    def receive(self, frame: bytes) -> bool:
        """Device side: place an incoming frame into the next RX descriptor."""
        if not self.accepts(frame):
            self.stats["rx_filtered"] += 1
            return False
        ring = self.rx
        slot = ring.slots[ring.head]
        if slot.own != DEVICE or len(frame) > MAX_FRAME:
            self.stats["rx_overflow"] += 1
            self.platform.log("rx_overflow", nic=self.mac.hex())
            return False
        slot.buffer[:len(frame)] = frame
        slot.length = len(frame)
        self._arrivals += 1
        slot.arrival = self._arrivals
        slot.own = HOST
        ring.advance()
        self.stats["rx"] += 1
        self.status["rint"] = 1
        if self.control_regs["intr_enable"]:
            self.platform.raise_interrupt(self.vector, "rx")
        return True

    def nic_rx_scan(self, actor=None):
        """All host-owned RX descriptors as (slot, frame), oldest first; nothing consumed."""
        if actor is not None and actor.kind == "ssv" and not self.platform.in_smm:
            return self.platform._fault(FaultKind.ACCESS_VIOLATION, actor,
                                        "nic_rx_scan outside SMM")
        ready = [(i, s) for i, s in enumerate(self.rx.slots) if s.own == HOST]
        ready.sort(key=lambda item: item[1].arrival)
        return [(i, s.frame()) for i, s in ready]

    def consume(self, index: int) -> bytes:
        slot = self.rx.slots[index]
        frame = slot.frame()
        slot.own = DEVICE
        slot.length = 0
        return frame

    def tamper(self, op: str, **kw) -> None:
        if op == "inject_rx":
            self.receive(kw["frame"])
        elif op == "set_reg":
            self.control_regs[kw["reg"]] = kw["value"]
        else:
            raise ValueError(f"unknown NIC mutation {op!r}")
        self.platform.log("nic_tamper", op=op)


class Fabric:
    """A reflective switch: every attached NIC that accepts a frame gets a copy."""

    def __init__(self):
        self.ports: list[Nic] = []
        self.capture: list[tuple[int, bytes]] = []
        self.capture_enabled = True

    def attach(self, nic: Nic) -> None:
        nic.link = self
        self.ports.append(nic)

    def transmit(self, src: Nic, frame: bytes) -> None:
        if self.capture_enabled:
            self.capture.append((src.platform.now, bytes(frame)))
        for nic in self.ports:
            nic.receive(frame)

    def export_pcap(self, path) -> int:
        from .pcap import write_pcap
        return write_pcap(path, self.capture)
