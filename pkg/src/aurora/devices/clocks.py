"""Five simulated clock/timer sources.

Each source is an up-counting tick stream derived from virtual time with an
exact rational rate.  Register views are derived from it: RTC as calendar
seconds, HPET and TSC as 64-bit up-counters, PIT and APIC timer as
down-counters that reload on underflow.  Tampering re-anchors the stream.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction

from ..errors import ConfigInvalid, Fault, FaultKind

NS_PER_S = 1_000_000_000
FS_PER_NS = 1_000_000


class Source(enum.Enum):
    RTC = "Rtc"
    HPET = "Hpet"
    PIT = "Pit"
    TSC = "Tsc"
    APIC = "ApicTimer"

    @classmethod
    def parse(cls, name: str) -> "Source":
        for s in cls:
            if name.lower() in (s.value.lower(), s.name.lower()):
                return s
        raise ConfigInvalid(f"unknown clock source {name!r}")


ALL_SOURCES = (Source.RTC, Source.HPET, Source.PIT, Source.TSC, Source.APIC)

PIT_MODULUS = 1 << 16
APIC_MODULUS = 1 << 32
U64 = 1 << 64


@dataclass
class ClockConfig:
    tsc_hz: int = 2_800_000_000
    hpet_period_fs: int = 100_000_000          # 100 ns
    pit_hz: int = 1_193_182
    apic_bus_hz: int = 100_000_000
    apic_divisor: int = 16
    rtc_calibration: int = 1_704_067_200       # 2024-01-01T00:00:00Z
    rtc_uip_window_ns: int = 244_000
    skew: dict = field(default_factory=dict)   # source name -> fractional rate error
    missing: list = field(default_factory=list)

    @property
    def apic_hz(self) -> Fraction:
        return Fraction(self.apic_bus_hz, self.apic_divisor)

    def nominal_rate(self, source: Source) -> Fraction:
        """Ticks per nanosecond."""
        if source is Source.RTC:
            return Fraction(1, NS_PER_S)
        if source is Source.HPET:
            return Fraction(FS_PER_NS, self.hpet_period_fs)
        if source is Source.PIT:
            return Fraction(self.pit_hz, NS_PER_S)
        if source is Source.TSC:
            return Fraction(self.tsc_hz, NS_PER_S)
        return self.apic_hz / NS_PER_S

    @classmethod
    def from_dict(cls, data: dict | None) -> "ClockConfig":
        cfg = cls()
        for key, value in (data or {}).items():
            if not hasattr(cfg, key):
                raise ConfigInvalid(f"unknown clock option {key!r}")
            setattr(cfg, key, value)
        return cfg


class TickSource:
    """value(t) = anchor + (t - anchor_t) * rate, floored on read."""

    def __init__(self, rate: Fraction):
        self.rate = rate
        self.anchor_t = 0
        self.anchor = Fraction(0)

    def exact(self, t: int) -> Fraction:
        return self.anchor + (t - self.anchor_t) * self.rate

    def ticks(self, t: int) -> int:
        return math.floor(self.exact(t))

    def rebase(self, t: int, rate: Fraction) -> None:
        self.anchor = self.exact(t)
        self.anchor_t = t
        self.rate = rate

    def shift(self, t: int, delta) -> None:
        self.rebase(t, self.rate)
        self.anchor += delta

    def next_increment(self, t: int) -> int | None:
        """Earliest virtual time > t at which the floored value increases."""
        if self.rate <= 0:
            return None
        target = self.ticks(t) + 1
        return self.anchor_t + math.ceil((target - self.anchor) / self.rate)


@dataclass(frozen=True)
class RtcReading:
    seconds: int
    read_count: int

    @property
    def calendar(self) -> datetime:
        return datetime.fromtimestamp(self.seconds, timezone.utc)


class ClockBank:
    def __init__(self, platform, config: ClockConfig | None = None):
        self.platform = platform
        self.config = config or ClockConfig()
        self.sources: dict[Source, TickSource] = {}
        self.nominal: dict[Source, Fraction] = {}
        for source in ALL_SOURCES:
            rate = self.config.nominal_rate(source)
            self.nominal[source] = rate
            skew = self.config.skew.get(source.value, self.config.skew.get(source.name, 0))
            if skew:
                rate = rate * (1 + Fraction(skew).limit_denominator(10**9))
            self.sources[source] = TickSource(rate)
        self.missing = {Source.parse(s) if isinstance(s, str) else s
                        for s in self.config.missing}
        self.rtc_reads = 0
        self.last_rtc_read_count = 0
        self.last_stamp = 0        # TSC latched with the most recent register read

    def present(self, source: Source) -> bool:
        return source not in self.missing

    # -- register views ----------------------------------------------------

    def raw(self, source: Source, t: int | None = None) -> int:
        t = self.platform.now if t is None else t
        ticks = self.sources[source].ticks(t)
        if source is Source.RTC:
            return self.config.rtc_calibration + ticks
        if source in (Source.HPET, Source.TSC):
            return ticks % U64
        if source is Source.PIT:
            return (-ticks) % PIT_MODULUS
        return (-ticks) % APIC_MODULUS

    def update_in_progress(self, t: int | None = None) -> bool:
        t = self.platform.now if t is None else t
        nxt = self.sources[Source.RTC].next_increment(t)
        return nxt is not None and nxt - t <= self.config.rtc_uip_window_ns

    # -- driver-facing read ------------------------------------------------------

    def read_clock(self, source: Source):
        """Register-level read from SMM; RTC reads follow the double-read protocol."""
        platform = self.platform
        if not platform.in_smm:
            return platform._fault(FaultKind.ACCESS_VIOLATION, None,
                                   f"read_clock({source.value}) outside SMM")
        if not self.present(source):
            return None
        if source is not Source.RTC:
            value = self.raw(source)
            self.last_stamp = self.raw(Source.TSC)
            platform.charge("timer_read")
            return value
        count = 1
        if self.update_in_progress():
            # inconsistent read: discard it and re-read once the update finished
            boundary = self.sources[Source.RTC].next_increment(platform.now)
            platform.charge("rtc_read")
            self.rtc_reads += 1
            if platform.now < boundary:
                platform.advance(boundary - platform.now, "rtc_wait")
            count = 2
        value = self.raw(Source.RTC)
        self.last_stamp = self.raw(Source.TSC)
        platform.charge("rtc_read")
        self.rtc_reads += 1
        self.last_rtc_read_count = count
        return RtcReading(value, count)

    # -- adversary -----------------------------------------------------------

    def tamper(self, source: Source, op: str, amount=0, *, seconds: float | None = None) -> None:
        """Apply a mutation: set_back, jump, freeze, unfreeze, rate."""
        now = self.platform.now
        stream = self.sources[source]
        if seconds is not None:
            amount = Fraction(seconds).limit_denominator(10**9) * NS_PER_S * self.nominal[source]
        if op == "set_back":
            stream.shift(now, -Fraction(amount))
        elif op == "jump":
            stream.shift(now, Fraction(amount))
        elif op == "freeze":
            stream.rebase(now, Fraction(0))
        elif op == "unfreeze":
            stream.rebase(now, self.nominal[source])
        elif op == "rate":
            stream.rebase(now, self.nominal[source] * Fraction(amount).limit_denominator(10**6))
        else:
            raise ConfigInvalid(f"unknown clock mutation {op!r}")
        self.platform.log("clock_tamper", source=source.value, op=op)
