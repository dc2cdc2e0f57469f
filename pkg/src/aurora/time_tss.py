"""Enclave-side trusted time.

One Clock/Read SMM call returns a raw snapshot of all five sources.  This
module turns it into an absolute ``timeval`` and checks it against history:

* tv_sec comes from the RTC; tv_usec from HPET ticks counted from the most
  recent RTC second boundary.  A boundary is known exactly whenever the SSV
  had to repeat an RTC read (the repeat happens right at the rollover).
  Until one has been seen, tv_usec is HPET time modulo one second and the
  value is marked low-confidence.
* Every timer reading carries the TSC value latched with it; readings are
  moved back to the RTC read instant using the TSC-measured latency.
* The validator applies a monotonic rule per source and cross-checks the
  elapsed time implied by each source against the consensus (median of the
  high-resolution timers).
"""

from __future__ import annotations

import json
import math
import os
import statistics
import time as _time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from fractions import Fraction

from .channel.frames import Device, Operation
from .channel.protocol import ClockInfo, RawClockSample
from .channel.session import Session
from .errors import AttackDetected, SourceUnavailable

NS_PER_S = 1_000_000_000
PIT_MODULUS = 1 << 16
APIC_MODULUS = 1 << 32

MONOTONIC = "Monotonic"
RATE_MISMATCH = "RateMismatch"

DEFAULT_TOLERANCE = 0.10
# allowance for floor quantization of the TSC-based latency correction
ADJUST_SLACK_NS = 2_000


@dataclass(frozen=True)
class ClockSample:
    rtc_seconds: int
    hpet_ticks: int
    pit_ticks: int           # normalized, cumulative
    tsc_ticks: int
    apic_ticks: int          # normalized, cumulative
    sampled_at: int
    rtc_read_count: int = 1
    present_mask: int = 0x1F
    # readings moved back to the RTC read instant (fractional ticks)
    hpet_ref: Fraction = field(default=Fraction(0), compare=False)
    pit_ref: Fraction = field(default=Fraction(0), compare=False)
    tsc_ref: Fraction = field(default=Fraction(0), compare=False)
    apic_ref: Fraction = field(default=Fraction(0), compare=False)

    @property
    def rtc_calendar(self) -> datetime:
        return datetime.fromtimestamp(self.rtc_seconds, timezone.utc)

    def has(self, source: str) -> bool:
        order = ("Rtc", "Hpet", "Pit", "Tsc", "ApicTimer")
        return bool(self.present_mask & (1 << order.index(source)))

    def to_record(self) -> dict:
        return {
            "rtc": self.rtc_seconds, "hpet": self.hpet_ticks, "pit": self.pit_ticks,
            "tsc": self.tsc_ticks, "apic": self.apic_ticks, "sampled_at": self.sampled_at,
            "rtc_read_count": self.rtc_read_count, "present_mask": self.present_mask,
            "hpet_ref": str(self.hpet_ref), "pit_ref": str(self.pit_ref),
            "tsc_ref": str(self.tsc_ref), "apic_ref": str(self.apic_ref),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "ClockSample":
        return cls(rec["rtc"], rec["hpet"], rec["pit"], rec["tsc"], rec["apic"],
                   rec["sampled_at"], rec.get("rtc_read_count", 1),
                   rec.get("present_mask", 0x1F),
                   Fraction(rec.get("hpet_ref", rec["hpet"])),
                   Fraction(rec.get("pit_ref", rec["pit"])),
                   Fraction(rec.get("tsc_ref", rec["tsc"])),
                   Fraction(rec.get("apic_ref", rec["apic"])))


@dataclass(frozen=True)
class Violation:
    source: str
    prev: object
    curr: object
    rule: str


@dataclass(frozen=True)
class TimeVerdict:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def sources(self) -> set[str]:
        return {v.source for v in self.violations}


@dataclass(frozen=True)
class TimeValue:
    tv_sec: int
    tv_usec: int
    low_confidence: bool = field(default=False, compare=False)
    relative: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not 0 <= self.tv_usec <= 999_999:
            raise ValueError(f"tv_usec {self.tv_usec} out of range")

    @property
    def total_us(self) -> int:
        return self.tv_sec * 1_000_000 + self.tv_usec


@dataclass(frozen=True)
class Rates:
    """Nominal ticks per nanosecond for each source, from the SSV probe."""

    hpet: Fraction
    pit: Fraction
    tsc: Fraction
    apic: Fraction
    hpet_period_ns: Fraction

    @classmethod
    def from_info(cls, info: ClockInfo) -> "Rates":
        return cls(hpet=Fraction(1_000_000, info.hpet_period_fs),
                   pit=Fraction(info.pit_hz, NS_PER_S),
                   tsc=Fraction(info.tsc_hz, NS_PER_S),
                   apic=Fraction(info.apic_bus_hz, info.apic_divisor * NS_PER_S),
                   hpet_period_ns=Fraction(info.hpet_period_fs, 1_000_000))

    @classmethod
    def default(cls) -> "Rates":
        return cls.from_info(ClockInfo(0x1F, 100_000_000, 2_800_000_000, 1_193_182,
                                       100_000_000, 16, 244_000))

    def quantum_ns(self, source: str) -> Fraction:
        rate = {"Hpet": self.hpet, "Pit": self.pit, "Tsc": self.tsc, "ApicTimer": self.apic}
        return 1 / rate[source]


def _unwrap(prev_raw: int, raw: int, modulus: int, guide_ticks: Fraction | None) -> int:
    """Elapsed ticks of a down-counter, choosing the wrap count nearest the guide."""
    base = (prev_raw - raw) % modulus
    if guide_ticks is None or guide_ticks < modulus / 2:
        return base
    wraps = round((guide_ticks - base) / modulus)
    return base + max(0, wraps) * modulus


def decode_sample(raw: RawClockSample, rates: Rates, prev: ClockSample | None) -> ClockSample:
    """Normalize one raw snapshot against the previous sample."""
    ref = raw.rtc_stamp

    def lag(stamp: int, rate: Fraction) -> Fraction:
        """Ticks a source advanced between the RTC read and its own read."""
        if not stamp or not ref:
            return Fraction(0)
        return (stamp - ref) / rates.tsc * rate

    hpet_ref = raw.hpet - lag(raw.hpet_stamp, rates.hpet)
    tsc_ref = Fraction(ref or raw.tsc)
    # down-counters are normalized to cumulative up-counts
    if prev is None:
        apic = (-raw.apic) % APIC_MODULUS
        pit = (-raw.pit) % PIT_MODULUS
    else:
        hints = []
        if raw.present_mask & 0b00010:
            hints.append((hpet_ref - prev.hpet_ref) / rates.hpet)
        if raw.present_mask & 0b01000:
            hints.append((tsc_ref - prev.tsc_ref) / rates.tsc)
        guide = statistics.median(hints) if hints else None
        prev_apic_raw = (-prev.apic_ticks) % APIC_MODULUS
        apic = prev.apic_ticks + _unwrap(prev_apic_raw, raw.apic, APIC_MODULUS,
                                         None if guide is None else guide * rates.apic)
        if raw.present_mask & 0b10000:
            hints.append(Fraction(apic - prev.apic_ticks) / rates.apic)
        guide = statistics.median(hints) if hints else None
        prev_pit_raw = (-prev.pit_ticks) % PIT_MODULUS
        pit = prev.pit_ticks + _unwrap(prev_pit_raw, raw.pit, PIT_MODULUS,
                                       None if guide is None else guide * rates.pit)
    return ClockSample(raw.rtc_seconds, raw.hpet, pit, raw.tsc, apic, raw.sampled_at,
                       raw.rtc_read_count, raw.present_mask, hpet_ref,
                       pit - lag(raw.pit_stamp, rates.pit), tsc_ref,
                       apic - lag(raw.apic_stamp, rates.apic))


def validate(history: list[ClockSample], new: ClockSample,
             tolerance: float = DEFAULT_TOLERANCE, rates: Rates | None = None) -> TimeVerdict:
    """Monotonic rule per source plus the cross-source rate check."""
    if not history:
        return TimeVerdict()
    rates = rates or Rates.default()
    prev = history[-1]
    out: list[Violation] = []

    both = lambda s: prev.has(s) and new.has(s)      # noqa: E731
    if both("Rtc") and new.rtc_seconds < prev.rtc_seconds:
        out.append(Violation("Rtc", prev.rtc_seconds, new.rtc_seconds, MONOTONIC))
    if both("Hpet") and new.hpet_ticks <= prev.hpet_ticks:
        out.append(Violation("Hpet", prev.hpet_ticks, new.hpet_ticks, MONOTONIC))
    if both("Tsc") and new.tsc_ticks <= prev.tsc_ticks:
        out.append(Violation("Tsc", prev.tsc_ticks, new.tsc_ticks, MONOTONIC))
    if both("Pit") and new.pit_ticks <= prev.pit_ticks:
        out.append(Violation("Pit", prev.pit_ticks, new.pit_ticks, MONOTONIC))
    if both("ApicTimer") and new.apic_ticks <= prev.apic_ticks:
        out.append(Violation("ApicTimer", prev.apic_ticks, new.apic_ticks, MONOTONIC))

    estimates: dict[str, Fraction] = {}
    if both("Hpet"):
        estimates["Hpet"] = (new.hpet_ref - prev.hpet_ref) / rates.hpet
    if both("Tsc"):
        estimates["Tsc"] = (new.tsc_ref - prev.tsc_ref) / rates.tsc
    if both("ApicTimer"):
        estimates["ApicTimer"] = (new.apic_ref - prev.apic_ref) / rates.apic
    if both("Pit"):
        estimates["Pit"] = (new.pit_ref - prev.pit_ref) / rates.pit
    if estimates:
        consensus = statistics.median(estimates.values())
        pit_wrap_ns = PIT_MODULUS / rates.pit
        for source, est in estimates.items():
            if source == "Pit" and consensus > pit_wrap_ns / 2:
                continue   # unwrap was guided by the others; no independent evidence
            allowed = (Fraction(tolerance) * abs(consensus) + rates.quantum_ns(source)
                       + ADJUST_SLACK_NS)
            if abs(est - consensus) > allowed:
                out.append(Violation(source, float(consensus), float(est), RATE_MISMATCH))
        if both("Rtc"):
            est = Fraction((new.rtc_seconds - prev.rtc_seconds) * NS_PER_S)
            allowed = Fraction(tolerance) * abs(consensus) + NS_PER_S
            if abs(est - consensus) > allowed:
                out.append(Violation("Rtc", float(consensus), float(est), RATE_MISMATCH))
    return TimeVerdict(tuple(out))


class TimeService:
    """Trusted time for one enclave session."""

    def __init__(self, session: Session, *, tolerance: float = DEFAULT_TOLERANCE,
                 utc_offset_s: int = 0):
        self.session = session
        self.tolerance = tolerance
        self.utc_offset_s = utc_offset_s
        self.history: list[ClockSample] = []
        self.verdicts: list[TimeVerdict] = []
        self.values: list[TimeValue] = []
        self.info: ClockInfo | None = None
        self.rates: Rates | None = None
        self.anchor: tuple[int, Fraction] | None = None   # (rtc second, HPET at boundary)

    def probe(self) -> ClockInfo:
        payload = self.session.request(Device.CLOCK, Operation.PROBE)
        self.info = ClockInfo.unpack(payload)
        self.rates = Rates.from_info(self.info)
        return self.info

    def sample(self) -> tuple[ClockSample, TimeVerdict]:
        if self.info is None:
            self.probe()
        if not self.info.present("Hpet"):
            raise SourceUnavailable("HPET missing: no high-precision source for tv_usec")
        raw = RawClockSample.unpack(self.session.request(Device.CLOCK, Operation.READ))
        prev = self.history[-1] if self.history else None
        sample = decode_sample(raw, self.rates, prev)
        verdict = validate(self.history, sample, self.tolerance, self.rates)
        self.history.append(sample)
        self.verdicts.append(verdict)
        return sample, verdict

    def _compose(self, sample: ClockSample) -> TimeValue:
        period = self.rates.hpet_period_ns
        if not sample.has("Rtc"):
            # reference clock only: relative time since HPET reset
            ns = math.floor(sample.hpet_ref * period)
            return TimeValue(ns // NS_PER_S, (ns // 1000) % 1_000_000, True, True)
        if sample.rtc_read_count >= 2:
            self.anchor = (sample.rtc_seconds, sample.hpet_ref)
        if self.anchor is None:
            us = math.floor(sample.hpet_ref * period / 1000)
            return TimeValue(sample.rtc_seconds, us % 1_000_000, low_confidence=True)
        anchor_sec, anchor_hpet = self.anchor
        boundary = anchor_hpet + (sample.rtc_seconds - anchor_sec) * NS_PER_S / period
        us = math.floor((sample.hpet_ref - boundary) * period / 1000)
        return TimeValue(sample.rtc_seconds, min(max(us, 0), 999_999))

    def now(self) -> tuple[TimeValue, TimeVerdict]:
        sample, verdict = self.sample()
        value = self._compose(sample)
        self.values.append(value)
        return value, verdict

    # -- history export ------------------------------------------------------------

    def export_history(self, path) -> int:
        """One JSON object per line: the sample plus its verdict."""
        with open(path, "w") as fh:
            for sample, verdict in zip(self.history, self.verdicts):
                rec = sample.to_record()
                rec["ok"] = verdict.ok
                rec["violations"] = [asdict(v) for v in verdict.violations]
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return len(self.history)


def load_history(path) -> list[ClockSample]:
    with open(path) as fh:
        return [ClockSample.from_record(json.loads(line)) for line in fh if line.strip()]


def revalidate(samples: list[ClockSample], tolerance: float = DEFAULT_TOLERANCE,
               rates: Rates | None = None) -> list[TimeVerdict]:
    return [validate(samples[:i], s, tolerance, rates) for i, s in enumerate(samples)]


class PosixTime:
    """time(), gettimeofday(), localtime() and utimes() over trusted time."""

    def __init__(self, service: TimeService):
        self.service = service

    def _checked(self) -> TimeValue:
        value, verdict = self.service.now()
        if not verdict.ok:
            raise AttackDetected(verdict)
        return value

    def gettimeofday(self) -> TimeValue:
        return self._checked()

    def time(self) -> int:
        return self._checked().tv_sec

    def localtime(self, seconds: int | None = None) -> _time.struct_time:
        if seconds is None:
            seconds = self.time()
        tz = timezone(timedelta(seconds=self.service.utc_offset_s))
        return datetime.fromtimestamp(seconds, tz).timetuple()

    def utimes(self, path, times: tuple[float, float] | None = None) -> None:
        if times is None:
            value = self._checked()
            stamp = value.tv_sec + value.tv_usec / 1e6
            times = (stamp, stamp)
        os.utime(path, times)
