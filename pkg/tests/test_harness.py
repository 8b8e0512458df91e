"""End-to-end scenario runner tests at small durations and high time scale."""

import asyncio
import json
import socket

import pytest

from gridghost import report as rpt
from gridghost.capture import read_capture
from gridghost.harness import RunError, run_scenario
from gridghost.scenario import OperatorStep, Scenario

TOP_LINE = ["RTU_01", "RTU_02", "RTU_03", "RTU_04", "RTU_05", "RTU_06"]
NOMINAL = {"RTU_01": 11391, "RTU_02": 8391, "RTU_03": 4391,
           "RTU_04": 1139, "RTU_05": 689, "RTU_06": 300,
           "RTU_07": 0, "RTU_08": 0, "RTU_09": 5000,
           "RTU_10": 12000, "RTU_11": 18076}


def run(scenario, out_dir):
    return asyncio.run(run_scenario(scenario, str(out_dir)))


@pytest.fixture(scope="module")
def clean_run(tmp_path_factory):
    s = Scenario(name="clean-fast", duration=5, time_scale=30)
    return run(s, tmp_path_factory.mktemp("clean"))


@pytest.fixture(scope="module")
def zero_run(tmp_path_factory):
    s = Scenario(name="zero-fast", duration=8, time_scale=30,
                 iaml_path="scenarios/iaml/zero_values.xml",
                 windows=((2.0, 4.0), (5.5, 6.5)))
    return run(s, tmp_path_factory.mktemp("zero"))


@pytest.fixture(scope="module")
def multistage_run(tmp_path_factory):
    s = Scenario(name="multistage-fast", duration=12, time_scale=25,
                 iaml_path="scenarios/iaml/multistage.xml",
                 windows=((2.0, 10.0),),
                 operator=(OperatorStep(4.0, "RTU_01", "open"),
                           OperatorStep(6.0, "RTU_01", "close")))
    return run(s, tmp_path_factory.mktemp("multistage"))


@pytest.fixture(scope="module")
def half_duplex_run(tmp_path_factory):
    s = Scenario(name="half-duplex-fast", duration=5, time_scale=30,
                 iaml_path="scenarios/iaml/half_duplex.xml", half_duplex=True)
    return run(s, tmp_path_factory.mktemp("hd"))


def by_channel_direction(records):
    out = {}
    for r in records:
        out.setdefault((r.channel, r.direction), []).append(r)
    return out


def test_clean_run_artifacts_exist(clean_run):
    for path in (clean_run.hmi_capture, clean_run.plc_capture,
                 clean_run.hmi_view, clean_run.grid_log_path,
                 clean_run.run_meta, clean_run.report_path):
        assert path.exists(), path
    meta = json.loads(clean_run.run_meta.read_text())
    assert meta["outcome"] == "completed"
    assert len(meta["ports"]["plc"]) == 11
    assert len(meta["ports"]["proxy"]) == 11


def test_clean_run_is_transparent(clean_run):
    hmi = by_channel_direction(clean_run.hmi_records)
    plc = by_channel_direction(clean_run.plc_records)
    assert set(hmi) == set(plc)
    total = 0
    for key in hmi:
        assert [r.raw for r in hmi[key]] == [r.raw for r in plc[key]]
        total += len(hmi[key])
    assert total > 300
    assert not any(r.rewritten for r in clean_run.hmi_records)
    assert not any(r.rewritten for r in clean_run.plc_records)


def test_clean_run_report_all_zero(clean_run):
    report = clean_run.report
    assert report["per_window"][0]["max_delta_centi"] == 0
    assert report["commands"] == []
    assert report["blackout"]["verdict"] is False
    assert report["plc_side_truthful"] is True


def test_clean_view_converges_to_baseline(clean_run):
    last = {}
    for event in clean_run.view_log:
        if event.get("type") == "view":
            last[event["rtu"]] = event
    assert set(last) == set(NOMINAL)
    for rtu, nominal in NOMINAL.items():
        assert last[rtu]["current"] == nominal / 100
        expected = "open" if rtu in ("RTU_07", "RTU_08") else "closed"
        assert last[rtu]["breaker"] == expected


def test_zero_values_window_discipline(zero_run):
    plc_values = {(x.channel, x.tid): x.values
                  for x in rpt.read_exchanges(zero_run.plc_records)}
    checked_in = checked_out = 0
    for x in rpt.read_exchanges(zero_run.hmi_records):
        if x.channel not in TOP_LINE:
            assert x.values == plc_values[(x.channel, x.tid)]
            continue
        in_window = any(s <= x.t_query <= e for s, e in ((2.0, 4.0), (5.5, 6.5)))
        if in_window:
            assert x.values == (0, 0), (x.channel, x.t_query)
            checked_in += 1
        else:
            assert x.values == plc_values[(x.channel, x.tid)]
            checked_out += 1
    assert checked_in > 10
    assert checked_out > 10
    assert zero_run.report["plc_side_truthful"] is True


def test_zero_values_counts_and_lengths_preserved(zero_run):
    hmi = by_channel_direction(zero_run.hmi_records)
    plc = by_channel_direction(zero_run.plc_records)
    for key in hmi:
        assert len(hmi[key]) == len(plc[key])
        for a, b in zip(hmi[key], plc[key]):
            assert len(a.raw) == len(b.raw)
            assert a.tid == b.tid


def test_multistage_commands_reversed_and_confirmed(multistage_run):
    ops = multistage_run.operator_log
    assert [o["result"]["status"] for o in ops] == ["confirmed", "confirmed"]
    table = multistage_run.report["commands"]
    assert [(row["intended"], row["executed"], row["reversed"])
            for row in table] == [("open", "close", True),
                                  ("close", "open", True)]
    switches = [e for e in multistage_run.grid_log if e.get("event") == "switch"]
    assert [(e["switch"], e["close"]) for e in switches] == [
        ("RTU_01", True), ("RTU_01", False)]


def test_multistage_display_phases(multistage_run):
    t_cmd1, t_cmd2 = (row["t"] for row in multistage_run.report["commands"])
    margin = 0.6
    for x in rpt.read_exchanges(multistage_run.hmi_records):
        if x.channel not in TOP_LINE:
            continue
        t = x.t_query
        if 2.0 + margin <= t <= t_cmd1 - margin:
            assert x.values == (0, 0), ("stage 0", x.channel, t)
        elif t_cmd1 + margin <= t <= t_cmd2 - margin:
            # opposite command executed close on an already-closed breaker:
            # truth is unchanged, display nominal - truth is still zero
            assert x.values == (0, 0), ("stage 1a", x.channel, t)
        elif t_cmd2 + margin <= t <= 10.0 - margin:
            assert x.values == (NOMINAL[x.channel], 2318), ("stage 1b", x.channel, t)


def test_multistage_breaker_display_follows_belief(multistage_run):
    t_cmd1, t_cmd2 = (row["t"] for row in multistage_run.report["commands"])
    margin = 0.6
    plc_breaker = {(x.channel, x.tid): x.values
                   for x in rpt.read_exchanges(multistage_run.plc_records, 1)}
    for x in rpt.read_exchanges(multistage_run.hmi_records, 1):
        if x.channel != "RTU_01":
            continue
        t = x.t_query
        if t_cmd1 + margin <= t <= t_cmd2 - margin:
            assert x.values == (0,), ("after open", t)
            assert plc_breaker[(x.channel, x.tid)] == (1,)
        elif t_cmd2 + margin <= t <= 10.0 - margin:
            assert x.values == (1,), ("after close", t)
            assert plc_breaker[(x.channel, x.tid)] == (0,)


def test_multistage_blackout_verdict(multistage_run):
    blackout = multistage_run.report["blackout"]
    assert blackout["verdict"] is True
    assert set(blackout["dead_buses"]) == {"B1", "B2", "B3", "B4", "B5", "B6"}
    for rtu in TOP_LINE:
        assert blackout["channels"][rtu]["displayed_centi"] == NOMINAL[rtu]


def test_half_duplex_shift_and_verbatim_responses(half_duplex_run):
    hmi_reads = rpt.read_exchanges(half_duplex_run.hmi_records, 130)
    plc_reads = rpt.read_exchanges(half_duplex_run.plc_records, 131)
    assert len(hmi_reads) == len(plc_reads) > 30
    assert rpt.read_exchanges(half_duplex_run.hmi_records, 131) == []
    hmi_resp = [r.raw for r in half_duplex_run.hmi_records
                if r.direction == "response"]
    plc_resp = [r.raw for r in half_duplex_run.plc_records
                if r.direction == "response"]
    assert hmi_resp == plc_resp
    for x in hmi_reads:
        assert x.values == (2318, 0)


def test_operator_runtime_rejection_is_logged(tmp_path):
    s = Scenario(name="rejects", duration=2, time_scale=30,
                 operator=(OperatorStep(0.5, "RTU_99", "open"),))
    result = run(s, tmp_path)
    assert result.operator_log[0]["http_status"] == 400
    assert result.operator_log[0]["result"]["status"] == "rejected"


def test_boot_failure_leaves_partial_logs(tmp_path):
    blocker = socket.socket()
    blocker.bind(("127.0.0.1", 0))
    blocker.listen(1)
    port = blocker.getsockname()[1]
    try:
        s = Scenario(name="collide", duration=2, time_scale=30,
                     plc_base_port=port - 1)  # RTU_01 lands on the taken port
        with pytest.raises(RunError, match="boot failed"):
            run(s, tmp_path)
    finally:
        blocker.close()
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["outcome"].startswith("boot failed")
    assert (tmp_path / "grid_log.jsonl").exists()


def test_report_recomputes_identically_from_files(zero_run):
    _, hmi = read_capture(str(zero_run.hmi_capture))
    _, plc = read_capture(str(zero_run.plc_capture))
    grid_log = [json.loads(line)
                for line in zero_run.grid_log_path.read_text().splitlines()]
    again = rpt.deception_report(hmi, plc, grid_log,
                                 windows=((2.0, 4.0), (5.5, 6.5)),
                                 scenario="zero-fast")
    assert again == zero_run.report


def test_timeseries_csv(clean_run, tmp_path):
    out = tmp_path / "series.csv"
    rows = rpt.emit_timeseries(clean_run.hmi_records, str(out))
    lines = out.read_text().splitlines()
    assert lines[0] == "time_s,rtu,current_a,voltage_kv"
    assert rows == len(lines) - 1
    assert rows == len(rpt.read_exchanges(clean_run.hmi_records))
    rtu01 = [line for line in lines[1:] if ",RTU_01," in line]
    assert rtu01
    assert all(line.endswith(",113.91,23.18") for line in rtu01)
