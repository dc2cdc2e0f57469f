import json

import pytest

from aurora.costs import CostTable
from aurora.devices.pcap import read_pcap
from aurora.errors import ConfigInvalid
from aurora.harness import Report, emit, load_scenario, parse, run, run_attack
from aurora.harness.bench import overhead_ratio
from aurora.harness.cli import main
from aurora.harness.scenario import Scenario, resolve, shipped

TINY = {
    "name": "tiny",
    "duration_ns": 30_000_000,
    "enclaves": [{"name": "clock", "workload": "time", "count": 4, "interval_ns": 5_000_000}],
}


@pytest.mark.parametrize("patch", [
    {"enclaves": [{"name": "x", "workload": "mining"}]},
    {"seed": -1},
    {"warp": 1},
    {"machine": {"fifo_capacity": 0}},
])
def test_schema_rejects(patch):
    with pytest.raises(ConfigInvalid):
        Scenario.from_dict({**TINY, **patch})


def test_scenario_roundtrip_and_lookup(tmp_path):
    sc = Scenario.from_dict(TINY)
    assert Scenario.from_dict(sc.to_dict()) == sc
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    assert load_scenario(str(path)) == sc
    assert set(shipped("scenarios")) >= {"attack-base", "time-honest", "net-honest", "mixed"}
    with pytest.raises(ConfigInvalid):
        load_scenario("no-such-scenario")


def test_run_is_deterministic_and_balanced():
    a, b = run(Scenario.from_dict(TINY), seed=4), run(Scenario.from_dict(TINY), seed=4)
    assert a.event_log_digest == b.event_log_digest
    assert a.ok and a.invariants["counter_conservation"]["ok"]
    assert a.counters["clock.ops"] == 4 and a.counters["clock.errors"] == 0
    # without jitter the seed only picks keys, which never reach the log
    assert run(Scenario.from_dict(TINY), seed=5).event_log_digest == a.event_log_digest
    jittered = {**TINY, "enclaves": [{**TINY["enclaves"][0], "jitter": 0.5}]}
    assert (run(Scenario.from_dict(jittered), seed=4).event_log_digest
            != run(Scenario.from_dict(jittered), seed=5).event_log_digest)


def test_report_json_roundtrip():
    report = run_attack("tamper", seed=1)
    assert report.verdicts["tamper"]["holds"]
    again = parse(emit(report, "json"))
    assert again == report
    assert isinstance(again, Report)
    table = emit(report, "table").decode()
    assert "tamper" in table
    with pytest.raises(ValueError):
        emit(report, "xml")


def test_overhead_model_closed_form():
    # one request per interval: the SMI is stretched to the dwell floor, and the
    # enclave still seals, copies out, copies back and opens outside SMM
    c = CostTable()
    outside = c.epc_encrypt + c.copy_to_shared + c.copy_to_epc + c.epc_decrypt
    requests, ratio = overhead_ratio(1_000_000, 78_000, work_ns=10_000_000)
    assert requests == 10
    assert ratio == 10 * (78_000 + outside) / 10_000_000 == 0.087
    assert overhead_ratio(float("inf"), 78_000, work_ns=10_000_000) == (0, 0.0)


# -- CLI -------------------------------------------------------------------------------

def test_cli_list(capsys):
    assert main(["list-scenarios"]) == 0
    out = capsys.readouterr().out
    assert "attack-base" in out and "rtc-rollback" in out


def test_cli_attack_json(capsys):
    assert main(["attack", "fake-ssv", "--seed", "2", "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["verdicts"]["fake-ssv"]["observed"] == "DetectedAs(AuthFailSsv)"


def test_cli_run_with_pcap(tmp_path, capsys):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps(TINY))
    pcap = tmp_path / "out.pcap"
    assert main(["run", str(spec), "--pcap", str(pcap)]) == 0
    assert pcap.exists()
    read_pcap(pcap)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["run", "no-such-scenario"]) == 2
    assert "ConfigInvalid" in capsys.readouterr().err
    # an expectation that cannot hold gives exit status 1
    script = resolve("attacks", "tamper")
    script["expected"] = "NoEffect"
    path = tmp_path / "wrong.json"
    path.write_text(json.dumps(script))
    assert main(["attack", str(path)]) == 1
