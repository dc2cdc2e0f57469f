"""SMM drivers.  Each exposes exactly three entry points: probe, read, write."""

from __future__ import annotations

from ..channel.frames import Device
from ..channel.protocol import SOURCE_ORDER, ClockInfo, NicInfo, RawClockSample
from ..devices.clocks import ClockBank, RtcReading, Source
from ..devices.nic import Nic
from ..errors import DriverError, Fault
from .flows import ipv4_options

DRIVER_OPERATIONS = ("probe", "read", "write")


class Driver:
    device_id: int = -1
    name = "driver"

    def probe(self, ctx, payload: bytes) -> bytes:
        raise NotImplementedError

    def read(self, ctx, payload: bytes) -> bytes:
        raise NotImplementedError

    def write(self, ctx, payload: bytes) -> bytes:
        raise NotImplementedError


class ClockDriver(Driver):
    device_id = Device.CLOCK
    name = "Clock"

    def __init__(self, clocks: ClockBank):
        self.clocks = clocks

    def _mask(self) -> int:
        mask = 0
        for i, name in enumerate(SOURCE_ORDER):
            if self.clocks.present(Source(name)):
                mask |= 1 << i
        return mask

    def probe(self, ctx, payload: bytes) -> bytes:
        cfg = self.clocks.config
        return ClockInfo(self._mask(), cfg.hpet_period_fs, cfg.tsc_hz, cfg.pit_hz,
                         cfg.apic_bus_hz, cfg.apic_divisor, cfg.rtc_uip_window_ns).pack()

    def _read(self, source: Source) -> tuple[int, int]:
        value = self.clocks.read_clock(source)
        if isinstance(value, Fault):
            raise DriverError(str(value))
        if value is None:
            return 0, 0
        if isinstance(value, RtcReading):
            return value.seconds, self.clocks.last_stamp
        return value, self.clocks.last_stamp

    def read(self, ctx, payload: bytes) -> bytes:
        """RTC first (it fixes the snapshot instant), then the four timers."""
        platform = ctx.platform
        block = ctx.heap.alloc(128)
        rtc, rtc_stamp = self._read(Source.RTC)
        count = self.clocks.last_rtc_read_count if self.clocks.present(Source.RTC) else 0
        sampled_at = platform.now - (platform.costs.rtc_read if count else 0)
        hpet, hpet_stamp = self._read(Source.HPET)
        pit, pit_stamp = self._read(Source.PIT)
        tsc, _ = self._read(Source.TSC)
        apic, apic_stamp = self._read(Source.APIC)
        platform.charge("clock_assemble")
        sample = RawClockSample(self._mask(), count, rtc, rtc_stamp, hpet, hpet_stamp, pit,
                                pit_stamp, tsc, apic, apic_stamp, sampled_at)
        packed = sample.pack()
        block.write(0, packed)
        return block.read(0, len(packed))

    def write(self, ctx, payload: bytes) -> bytes:
        raise DriverError("clock sources are read-only for enclaves")


class NicDriver(Driver):
    """Write: transmit one frame.  Read: pull tagged frames out of the RX ring."""

    device_id = Device.NIC
    name = "NIC"

    def __init__(self, nic: Nic):
        self.nic = nic

    def probe(self, ctx, payload: bytes) -> bytes:
        ctx.platform.charge("nic_probe")
        if self.nic.link is None:
            raise DriverError("NIC link down")
        return NicInfo(self.nic.mac, self.nic.tx.ring_len, 1500, 1).pack()

    def read(self, ctx, payload: bytes) -> bytes:
        delivered = ctx.ssv.scan_rx()
        return delivered.to_bytes(2, "big")

    def write(self, ctx, payload: bytes) -> bytes:
        nic, platform = self.nic, ctx.platform
        parsed = ipv4_options(payload)
        if parsed is not None:
            entry = ctx.flow
            if entry is None or parsed[0][:4] != entry.tag:
                ctx.ssv.count("egress_tag_mismatch")
                raise DriverError("egress packet does not carry the requester's flow tag")
        block = ctx.heap.alloc(max(1, len(payload)))
        block.write(0, payload)
        frame = block.read(0, len(payload))
        platform.charge("nic_context")
        counter = nic.suspend()
        index = nic.fill_tx(frame, counter)
        # immediate send demand, then the interrupt it raises is acknowledged here
        nic.control_regs["run"] = 1
        nic.kick()
        platform.charge("nic_tx")
        platform.ack_pending(nic.vector, "tx")
        return index.to_bytes(2, "big")
