"""Post-run analysis: exchange pairing, deception report, plot data.

Everything here is a pure function of the run artifacts, so re-running the
analysis over the same capture files always produces identical output. The
deception report quantifies what the operator saw versus what the grid
actually did: per attack window the worst display error per RTU, the table
of intended versus executed switch commands, and a blackout verdict (true
load lost while the console shows nominal values).
"""

from __future__ import annotations

import csv
from bisect import bisect_right
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .capture import TrafficRecord
from . import modbus as mb

CURRENT_REGISTER = 130


class ReportError(Exception):
    pass


@dataclass(frozen=True)
class Exchange:
    """One query/response pair on a channel, as seen on one segment."""

    channel: str
    segment: str
    tid: int
    t_query: float
    t_response: float
    function: int
    kind: str
    start_address: Optional[int] = None
    word_count: Optional[int] = None
    values: Optional[Tuple[int, ...]] = None
    address: Optional[int] = None
    query_value: Optional[int] = None
    response_value: Optional[int] = None
    query_rewritten: bool = False
    response_rewritten: bool = False


def pair_exchanges(records: Sequence[TrafficRecord]) -> List[Exchange]:
    """Match responses to queries per channel by transaction id."""
    pending: Dict[Tuple[str, int], TrafficRecord] = {}
    out: List[Exchange] = []
    for r in records:
        if r.direction == "query":
            pending[(r.channel, r.tid)] = r
            continue
        q = pending.pop((r.channel, r.tid), None)
        if q is None:
            continue  # response without a captured query; nothing to pair
        out.append(Exchange(
            channel=r.channel,
            segment=r.segment,
            tid=r.tid,
            t_query=q.t,
            t_response=r.t,
            function=q.function,
            kind=q.kind,
            start_address=q.start_address,
            word_count=q.word_count,
            values=r.values,
            address=q.address,
            query_value=q.value,
            response_value=r.value,
            query_rewritten=q.rewritten,
            response_rewritten=r.rewritten,
        ))
    return out


def read_exchanges(records: Sequence[TrafficRecord],
                   start_address: int = CURRENT_REGISTER) -> List[Exchange]:
    return [x for x in pair_exchanges(records)
            if x.kind == "read-request" and x.start_address == start_address
            and x.values is not None]


class Truth:
    """Piecewise-constant grid state over time, from the grid event log."""

    def __init__(self, grid_log: Sequence[dict]):
        states = [(e["t"], e["state"]) for e in grid_log if "state" in e]
        if not states:
            raise ReportError("grid log holds no states")
        states.sort(key=lambda pair: pair[0])
        self.times = [t for t, _ in states]
        self.states = [s for _, s in states]

    def at(self, t: float) -> dict:
        i = bisect_right(self.times, t) - 1
        return self.states[max(i, 0)]

    def current_centi(self, rtu: str, t: float) -> int:
        return self.at(t)["currents_centi"][rtu]

    def voltage_centi(self, rtu: str, t: float) -> int:
        return self.at(t)["voltages_centi"][rtu]

    @property
    def initial(self) -> dict:
        return self.states[0]


def _coil_action(value: Optional[int]) -> str:
    if value == mb.COIL_ON:
        return "close"
    if value == mb.COIL_OFF:
        return "open"
    return f"invalid(0x{(value or 0):04x})"


def command_table(hmi_records: Sequence[TrafficRecord],
                  plc_records: Sequence[TrafficRecord]) -> List[dict]:
    """Intended (HMI side) versus executed (PLC side) switch commands."""
    executed = {
        (x.channel, x.tid): x
        for x in pair_exchanges(plc_records) if x.kind == "write-coil-request"
    }
    table = []
    for x in pair_exchanges(hmi_records):
        if x.kind != "write-coil-request":
            continue
        done = executed.get((x.channel, x.tid))
        intended = _coil_action(x.query_value)
        row = {
            "t": x.t_query,
            "rtu": x.channel,
            "tid": x.tid,
            "intended": intended,
            "executed": _coil_action(done.query_value) if done else None,
            "reversed": (done is not None
                         and done.query_value != x.query_value),
        }
        table.append(row)
    return table


def deception_report(hmi_records: Sequence[TrafficRecord],
                     plc_records: Sequence[TrafficRecord],
                     grid_log: Sequence[dict], *,
                     windows: Optional[Sequence[Tuple[float, float]]] = None,
                     scenario: Optional[str] = None) -> dict:
    """Compare the operator's view against ground truth, window by window."""
    hmi_channels = {r.channel for r in hmi_records}
    plc_channels = {r.channel for r in plc_records}
    if hmi_records and plc_records and hmi_channels != plc_channels:
        raise ReportError("captures disagree on channels; not from the same run")

    truth = Truth(grid_log)
    nominal = truth.initial
    hmi_reads = read_exchanges(hmi_records)
    plc_reads = read_exchanges(plc_records)

    last_t = max((r.t for r in hmi_records), default=0.0)
    spans = [tuple(w) for w in windows] if windows else [(0.0, last_t)]

    per_window = []
    for start, end in spans:
        channels: Dict[str, dict] = {}
        for x in hmi_reads:
            if not start <= x.t_response <= end or len(x.values) < 2:
                continue
            true_c = truth.current_centi(x.channel, x.t_response)
            true_v = truth.voltage_centi(x.channel, x.t_response)
            entry = channels.setdefault(x.channel, {
                "max_delta_current_centi": 0,
                "max_delta_voltage_centi": 0,
                "samples": 0,
            })
            entry["max_delta_current_centi"] = max(
                entry["max_delta_current_centi"], abs(x.values[0] - true_c))
            entry["max_delta_voltage_centi"] = max(
                entry["max_delta_voltage_centi"], abs(x.values[1] - true_v))
            entry["samples"] += 1
        overall = max(
            (max(e["max_delta_current_centi"], e["max_delta_voltage_centi"])
             for e in channels.values()), default=0)
        per_window.append({
            "window": [start, end],
            "channels": dict(sorted(channels.items())),
            "max_delta_centi": overall,
        })

    commands = command_table(hmi_records, plc_records)

    # blackout verdict at the end of the last span: load actually lost
    # while the console still shows the nominal numbers
    t_eval = spans[-1][1]
    state = truth.at(t_eval)
    dead_buses = sorted(set(nominal["energized"]) - set(state["energized"]))
    affected = {}
    for rtu, nominal_c in nominal["currents_centi"].items():
        if nominal_c <= 0:
            continue
        if state["currents_centi"][rtu] != 0:
            continue
        shown = [x.values[0] for x in hmi_reads
                 if x.channel == rtu and x.t_response <= t_eval
                 and len(x.values) >= 1]
        affected[rtu] = {
            "nominal_centi": nominal_c,
            "true_centi": 0,
            "displayed_centi": shown[-1] if shown else None,
        }
    blackout = bool(dead_buses) and bool(affected) and all(
        a["displayed_centi"] == a["nominal_centi"] for a in affected.values())

    return {
        "scenario": scenario,
        "windows": [list(w) for w in spans],
        "per_window": per_window,
        "commands": commands,
        "blackout": {
            "verdict": blackout,
            "t": t_eval,
            "dead_buses": dead_buses,
            "channels": dict(sorted(affected.items())),
        },
        "plc_side_truthful": _plc_matches_truth(plc_reads, truth),
    }


def _plc_matches_truth(plc_reads: Sequence[Exchange], truth: Truth) -> bool:
    for x in plc_reads:
        if len(x.values) < 2:
            continue
        if (x.values[0] != truth.current_centi(x.channel, x.t_response)
                or x.values[1] != truth.voltage_centi(x.channel, x.t_response)):
            return False
    return True


def emit_timeseries(records: Sequence[TrafficRecord], out_path: str, *,
                    start_address: int = CURRENT_REGISTER) -> int:
    """Write plot-ready CSV rows (time, rtu, current A, voltage kV)."""
    rows = 0
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "rtu", "current_a", "voltage_kv"])
        for x in sorted(read_exchanges(records, start_address),
                        key=lambda x: (x.t_response, x.channel)):
            if len(x.values) < 2:
                continue
            writer.writerow([f"{x.t_response:.3f}", x.channel,
                             f"{x.values[0] / 100:.2f}", f"{x.values[1] / 100:.2f}"])
            rows += 1
    return rows
