import time

import pytest

from aurora.channel import kat
from aurora.machine import Machine

SUITE_BUDGET_S = 120.0

_results: list[tuple[str, bool, str]] = []
_started = time.monotonic()


def record(criterion: str, ok: bool, detail: str = "") -> None:
    """Remember one acceptance verdict for the end-of-run summary."""
    _results.append((criterion, ok, detail))


@pytest.fixture(scope="session", autouse=True)
def cipher_known_answers():
    # the channel is only trusted once its AEAD matches the published vectors
    problems = kat.self_test()
    if problems:
        pytest.exit("AEAD known-answer test failed: " + "; ".join(problems), returncode=3)


@pytest.fixture
def machine():
    return Machine(seed=7)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.monotonic() - _started
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for criterion, ok, detail in sorted(_results, key=lambda r: int(r[0].split()[0])):
        tr.write_line(f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    within = elapsed < SUITE_BUDGET_S
    tr.write_line(f"criterion 10 (suite runtime): {'PASS' if within else 'FAIL'}  "
                  f"{elapsed:.1f} s of {SUITE_BUDGET_S:.0f} s")


def pytest_sessionfinish(session, exitstatus):
    if _results and time.monotonic() - _started >= SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1
