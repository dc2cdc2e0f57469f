"""Payload codecs carried inside PlainFrames.

These are the device-level messages exchanged between enclave libraries and
the supervisor drivers.  All integers are big endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from ..errors import AuthFail

# the eleven workflow steps of one SMM call, in order
STEP_LABELS = (
    "EPC encryption",
    "Copy to shared RAM",
    "Switch to SMM",
    "Copy to SMRAM",
    "SMRAM decryption",
    "Clock Service",
    "SMRAM encryption",
    "Copy to shared RAM",
    "Return and enter SGX",
    "Copy to EPC",
    "EPC decryption",
)

SERVICE_LABELS = {1: "Clock Service", 2: "NIC Service", 0: "Control Service"}

# -- clock -------------------------------------------------------------------

SOURCE_ORDER = ("Rtc", "Hpet", "Pit", "Tsc", "ApicTimer")

_CLOCK_PROBE = struct.Struct(">BQQIQIQ")
_CLOCK_SAMPLE = struct.Struct(">BBBxQQQQQQQQQQQ")


@dataclass(frozen=True)
class ClockInfo:
    present_mask: int
    hpet_period_fs: int
    tsc_hz: int
    pit_hz: int
    apic_bus_hz: int
    apic_divisor: int
    rtc_uip_window_ns: int

    def present(self, source: str) -> bool:
        return bool(self.present_mask & (1 << SOURCE_ORDER.index(source)))

    def pack(self) -> bytes:
        return _CLOCK_PROBE.pack(self.present_mask, self.hpet_period_fs, self.tsc_hz,
                                 self.pit_hz, self.apic_bus_hz, self.apic_divisor,
                                 self.rtc_uip_window_ns)

    @classmethod
    def unpack(cls, data: bytes) -> "ClockInfo":
        return cls(*_CLOCK_PROBE.unpack(data[:_CLOCK_PROBE.size]))


@dataclass(frozen=True)
class RawClockSample:
    """One coherent snapshot of all sources as read inside SMM.

    Each ``*_stamp`` is the TSC value latched together with that reading, so
    the enclave can move every reading back to the RTC read instant.
    Missing sources read as 0 with their present bit clear.
    """

    present_mask: int
    rtc_read_count: int
    rtc_seconds: int
    rtc_stamp: int
    hpet: int
    hpet_stamp: int
    pit: int
    pit_stamp: int
    tsc: int
    apic: int
    apic_stamp: int
    sampled_at: int
    version: int = 1

    def pack(self) -> bytes:
        return _CLOCK_SAMPLE.pack(self.version, self.present_mask, self.rtc_read_count,
                                  self.rtc_seconds, self.rtc_stamp, self.hpet, self.hpet_stamp,
                                  self.pit, self.pit_stamp, self.tsc, self.apic,
                                  self.apic_stamp, self.sampled_at, 0)

    @classmethod
    def unpack(cls, data: bytes) -> "RawClockSample":
        if len(data) < _CLOCK_SAMPLE.size:
            raise AuthFail("short clock sample")
        (version, mask, count, rtc, rtc_st, hpet, hpet_st, pit, pit_st, tsc, apic, apic_st,
         at, _reserved) = _CLOCK_SAMPLE.unpack(data[:_CLOCK_SAMPLE.size])
        return cls(mask, count, rtc, rtc_st, hpet, hpet_st, pit, pit_st, tsc, apic, apic_st,
                   at, version)


# -- NIC -----------------------------------------------------------------------

_NIC_PROBE = struct.Struct(">6sHHB")


@dataclass(frozen=True)
class NicInfo:
    mac: bytes
    ring_len: int
    mtu: int
    link_up: int

    def pack(self) -> bytes:
        return _NIC_PROBE.pack(self.mac, self.ring_len, self.mtu, self.link_up)

    @classmethod
    def unpack(cls, data: bytes) -> "NicInfo":
        return cls(*_NIC_PROBE.unpack(data[:_NIC_PROBE.size]))


# -- control ------------------------------------------------------------------

CMD_FLOW = b"FLOW"
CMD_UNFLOW = b"UNFL"
CMD_TEARDOWN = b"TDWN"

_FLOW = struct.Struct(">4s4s4sh")


def pack_flow(tag: bytes, ipv4: bytes, notify_vector: int | None) -> bytes:
    return _FLOW.pack(CMD_FLOW, tag, ipv4, -1 if notify_vector is None else notify_vector)


def unpack_flow(data: bytes) -> tuple[bytes, bytes, int | None]:
    _cmd, tag, ipv4, vector = _FLOW.unpack(data[:_FLOW.size])
    return tag, ipv4, None if vector < 0 else vector
