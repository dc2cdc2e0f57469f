from fractions import Fraction

import pytest

from aurora.channel.protocol import RawClockSample
from aurora.devices.clocks import Source
from aurora.errors import AttackDetected
from aurora.time_tss import (
    MONOTONIC, RATE_MISMATCH, ClockSample, PosixTime, Rates, TimeService, TimeValue,
    decode_sample, load_history, revalidate, validate,
)

RTC0 = 1_704_067_200


def honest(ns: int, *, tsc_scale=1, hpet_scale=1, rtc_shift=0, mask=0x1F, count=1):
    """A sample taken at virtual time ``ns`` with every source ticking at its nominal rate."""
    hpet = Fraction(ns, 100) * hpet_scale
    tsc = Fraction(ns * 28, 10) * tsc_scale
    pit = Fraction(ns * 1_193_182, 10**9)
    apic = Fraction(ns * 625, 100_000)
    return ClockSample(RTC0 + ns // 10**9 + rtc_shift, int(hpet), int(pit), int(tsc), int(apic),
                       ns, count, mask, hpet, pit, tsc, apic)


def _rules(verdict):
    return {(v.source, v.rule) for v in verdict.violations}


def test_honest_history_passes():
    samples = [honest(t) for t in range(1_000_000, 3_000_000_000, 7_000_000)]
    assert all(v.ok for v in revalidate(samples))


def test_first_sample_has_nothing_to_compare():
    assert validate([], honest(5)).ok


def test_rtc_rollback_is_monotonic_violation():
    v = validate([honest(2_000_000_000)], honest(2_005_000_000, rtc_shift=-5))
    assert ("Rtc", MONOTONIC) in _rules(v)
    assert v.sources() == {"Rtc"}


def test_rtc_jump_forward_is_rate_mismatch():
    v = validate([honest(2_000_000_000)], honest(2_005_000_000, rtc_shift=5))
    assert _rules(v) == {("Rtc", RATE_MISMATCH)}


def test_frozen_hpet():
    prev = honest(10_000_000)
    new = honest(15_000_000)
    new = ClockSample(new.rtc_seconds, prev.hpet_ticks, new.pit_ticks, new.tsc_ticks,
                      new.apic_ticks, new.sampled_at, 1, 0x1F, prev.hpet_ref, new.pit_ref,
                      new.tsc_ref, new.apic_ref)
    assert _rules(validate([prev], new)) == {("Hpet", MONOTONIC), ("Hpet", RATE_MISMATCH)}


def test_tsc_at_double_rate():
    v = validate([honest(10_000_000, tsc_scale=2)], honest(15_000_000, tsc_scale=2))
    assert _rules(v) == {("Tsc", RATE_MISMATCH)}


@pytest.mark.parametrize("scale,flagged", [(Fraction(109, 100), False),
                                           (Fraction(111, 100), True)])
def test_tolerance_edge(scale, flagged):
    # a 5 ms interval; allowance is 10 % of the consensus plus quantum and slack
    prev = honest(100_000_000)
    new = honest(105_000_000)
    skewed = ClockSample(new.rtc_seconds, new.hpet_ticks, new.pit_ticks, new.tsc_ticks,
                         new.apic_ticks, new.sampled_at, 1, 0x1F, new.hpet_ref, new.pit_ref,
                         prev.tsc_ref + (new.tsc_ref - prev.tsc_ref) * scale, new.apic_ref)
    assert (("Tsc", RATE_MISMATCH) in _rules(validate([prev], skewed))) is flagged


def test_missing_sources_are_skipped():
    mask = 0b01011      # Rtc, Hpet, Tsc
    prev = honest(10_000_000, mask=mask)
    new = honest(15_000_000, mask=mask)
    new = ClockSample(new.rtc_seconds, new.hpet_ticks, 0, new.tsc_ticks, 0, new.sampled_at,
                      1, mask, new.hpet_ref, Fraction(0), new.tsc_ref, Fraction(0))
    assert validate([prev], new).ok


def test_pit_not_judged_across_long_intervals():
    # 30 ms is past half the PIT wrap period; a bogus PIT count is ignored
    prev = honest(10_000_000)
    new = honest(40_000_000)
    new = ClockSample(new.rtc_seconds, new.hpet_ticks, new.pit_ticks + 50_000, new.tsc_ticks,
                      new.apic_ticks, new.sampled_at, 1, 0x1F, new.hpet_ref,
                      new.pit_ref + 50_000, new.tsc_ref, new.apic_ref)
    assert validate([prev], new).ok


def _raw_at(t: int) -> RawClockSample:
    # stamps left at zero: no latency correction
    return RawClockSample(0x1F, 1, RTC0, 0, t // 100, 0, (-(t * 1_193_182 // 10**9)) % 65536, 0,
                          t * 28 // 10, (-(t * 625 // 100_000)) % 2**32, 0, t)


def test_decode_unwraps_pit_with_guide():
    rates = Rates.default()
    prev = decode_sample(_raw_at(10_000), rates, None)
    assert (prev.pit_ticks, prev.apic_ticks) == (11, 62)
    # 70 ms later: 83534 PIT ticks, so the 16-bit counter wrapped once
    t = 70_010_000
    sample = decode_sample(_raw_at(t), rates, prev)
    assert sample.pit_ticks == t * 1_193_182 // 10**9 == 83_534
    assert sample.apic_ticks == t * 625 // 100_000
    assert validate([prev], sample).ok


def test_time_value_range():
    with pytest.raises(ValueError):
        TimeValue(1, 1_000_000)
    assert TimeValue(2, 5).total_us == 2_000_005


def test_sample_record_roundtrip():
    s = honest(123_456_789)
    assert ClockSample.from_record(s.to_record()) == s
    assert s.rtc_calendar.year == 2024


# -- against the machine ---------------------------------------------------------

@pytest.fixture
def service(machine):
    return TimeService(machine.open_session(machine.create_enclave()))


def _run(machine, service, n, gap=5_000_000):
    out = []
    for _ in range(n):
        machine.platform.advance(gap)
        out.append(service.now())
    return out


def test_service_reports_honest_time(machine, service):
    results = _run(machine, service, 20)
    assert all(v.ok for _, v in results)
    values = [t.total_us for t, _ in results]
    assert values == sorted(values)
    assert results[0][0].low_confidence      # no second boundary seen yet


@pytest.mark.parametrize("source,op,kw,expect", [
    (Source.RTC, "set_back", {"seconds": 5}, "Rtc"),
    (Source.HPET, "freeze", {}, "Hpet"),
    (Source.TSC, "rate", {"amount": 2}, "Tsc"),
])
def test_tampering_detected(machine, service, source, op, kw, expect):
    _run(machine, service, 3)
    machine.clocks.tamper(source, op, **kw)
    _, verdict = _run(machine, service, 1)[0]
    assert expect in verdict.sources()


def test_history_export_and_revalidate(machine, service, tmp_path):
    _run(machine, service, 6)
    machine.clocks.tamper(Source.RTC, "set_back", seconds=5)
    _run(machine, service, 2)
    path = tmp_path / "history.jsonl"
    assert service.export_history(path) == 8
    loaded = load_history(path)
    assert loaded == service.history
    offline = revalidate(loaded, rates=service.rates)
    assert [v.ok for v in offline] == [v.ok for v in service.verdicts]
    assert [v.ok for v in offline].count(False) >= 1


def test_posix_layer(machine, service, tmp_path):
    posix = PosixTime(service)
    machine.platform.advance(5_000_000)
    assert posix.time() == RTC0
    service.utc_offset_s = 3600
    assert posix.localtime(RTC0).tm_hour == 1
    target = tmp_path / "f"
    target.write_text("x")
    machine.platform.advance(5_000_000)
    posix.utimes(target)
    assert int(target.stat().st_mtime) == RTC0
    machine.clocks.tamper(Source.RTC, "set_back", seconds=5)
    with pytest.raises(AttackDetected):
        posix.gettimeofday()
