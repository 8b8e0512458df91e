"""Scenario runner: boots the testbed, replays the operator, writes artifacts.

Boot order matters: grid first, then the PLC fleet (listening), then the
rewriting proxy in front of it, then the HMI master pointed at the proxy
ports. The operator script drives the console HTTP API, not the master
object, so a run exercises the same surface a human console would.

A run directory holds:
  hmi_side.jsonl   frames as the HMI saw them (proxy client side)
  plc_side.jsonl   frames as the PLCs saw them (proxy upstream side)
  hmi_view.jsonl   console events: view deltas and command results
  grid_log.jsonl   ground-truth grid states, one line per switch event
  run.json         scenario echo, ports, counters, operator log
  report.json      deception report computed from the above
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import httpx

from . import capture as cap
from . import grid as gr
from . import iaml
from . import plc
from . import proxy as prx
from . import report as rpt
from .clock import ScenarioClock
from .hmi import Endpoint, HmiMaster, build_api
from .scenario import Scenario

log = logging.getLogger(__name__)


class RunError(Exception):
    pass


@dataclass
class RunResult:
    out_dir: Path
    hmi_capture: Path
    plc_capture: Path
    hmi_view: Path
    grid_log_path: Path
    run_meta: Path
    report_path: Path
    report: dict = field(default_factory=dict)
    hmi_records: List[cap.TrafficRecord] = field(default_factory=list)
    plc_records: List[cap.TrafficRecord] = field(default_factory=list)
    grid_log: List[dict] = field(default_factory=list)
    view_log: List[dict] = field(default_factory=list)
    operator_log: List[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)


def _write_jsonl(path: Path, rows: List[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


async def run_scenario(scenario: Scenario, out_dir: str, *,
                       host: str = "127.0.0.1") -> RunResult:
    """Execute one scenario end to end and flush all artifacts."""
    scenario.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = RunResult(
        out_dir=out,
        hmi_capture=out / "hmi_side.jsonl",
        plc_capture=out / "plc_side.jsonl",
        hmi_view=out / "hmi_view.jsonl",
        grid_log_path=out / "grid_log.jsonl",
        run_meta=out / "run.json",
        report_path=out / "report.json",
    )

    clock = ScenarioClock(scale=scenario.time_scale)
    started_wall = time.time()

    grid_log: List[dict] = []

    def on_grid_event(event: dict) -> None:
        grid_log.append({"t": round(clock.now(), 6), **event})

    model = (gr.GridModel.from_dict(scenario.topology) if scenario.topology
             else gr.GridModel.default())
    grid = gr.Grid(model, on_event=on_grid_event)
    grid_log.append({"t": 0.0, "event": "init", "state": grid.state.as_dict()})

    rules = iaml.parse_file(scenario.iaml_path) if scenario.iaml_path else []

    meta = {"scenario": scenario.name, "started_wall": started_wall,
            "time_scale": scenario.time_scale}
    hmi_writer = cap.CaptureWriter(str(result.hmi_capture),
                                   meta={**meta, "segment": cap.SEGMENT_HMI})
    plc_writer = cap.CaptureWriter(str(result.plc_capture),
                                   meta={**meta, "segment": cap.SEGMENT_PLC})

    def tap(record: cap.TrafficRecord) -> None:
        (hmi_writer if record.segment == cap.SEGMENT_HMI else plc_writer).write(record)

    view_log: List[dict] = []

    def on_hmi_event(event: dict) -> None:
        view_log.append({"t": round(clock.now(), 6), **event})

    # fleet ports: explicit base or ephemeral when 0
    configs = []
    for rtu in plc.RTU_IDS:
        index = plc.rtu_index(rtu)
        port = scenario.plc_base_port + index if scenario.plc_base_port else 0
        configs.append(plc.PlcConfig(rtu_id=rtu, port=port, unit_id=index, host=host))

    fleet = plc.Fleet(grid, configs)
    proxy: Optional[prx.AttackProxy] = None
    master: Optional[HmiMaster] = None
    api_server = None
    api_task: Optional[asyncio.Task] = None
    operator_log: List[dict] = []
    port_map: Dict[str, Dict[str, int]] = {"plc": {}, "proxy": {}}
    outcome = "completed"
    try:
        try:
            await fleet.start()
            plc_ports = {r: s.bound_port for r, s in fleet.servers.items()}
            port_map["plc"] = plc_ports

            channels = []
            for rtu in plc.RTU_IDS:
                index = plc.rtu_index(rtu)
                listen = (scenario.listen_base_port + index
                          if scenario.listen_base_port else 0)
                channels.append(prx.ChannelConfig(
                    rtu_id=rtu, listen_host=host, listen_port=listen,
                    upstream_host=host, upstream_port=plc_ports[rtu],
                    identity=rtu))
            proxy = prx.AttackProxy(
                channels, rules, half_duplex=scenario.half_duplex,
                windows=list(scenario.windows) if scenario.windows else None,
                clock=clock.now, tap=tap)
            await proxy.start()
            port_map["proxy"] = {c.rtu_id: proxy.bound_port(c.rtu_id)
                                 for c in proxy.channels}

            endpoints = {
                rtu: Endpoint(host=host, port=proxy.bound_port(rtu),
                              unit_id=plc.rtu_index(rtu))
                for rtu in plc.RTU_IDS}
            master = HmiMaster(
                endpoints, clock=clock,
                poll_period=scenario.poll_period,
                response_timeout=scenario.response_timeout,
                on_event=on_hmi_event)
            await master.start()

            app = build_api(master)
            if scenario.api_port is not None:
                api_server, api_task = await _serve_api(
                    app, host, int(scenario.api_port))
        except Exception as e:
            outcome = f"boot failed: {e}"
            raise RunError(outcome) from e

        op_task = asyncio.create_task(
            _operator_script(scenario, clock, app, operator_log))
        try:
            await clock.sleep_until(scenario.duration)
        finally:
            if not op_task.done():
                op_task.cancel()
            await asyncio.gather(op_task, return_exceptions=True)
    finally:
        if api_server is not None:
            api_server.should_exit = True
            await asyncio.gather(api_task, return_exceptions=True)
        if master is not None:
            await master.stop()
        if proxy is not None:
            await proxy.stop()
        await fleet.stop()

        hmi_writer.close()
        plc_writer.close()
        _write_jsonl(result.grid_log_path, grid_log)
        _write_jsonl(result.hmi_view, view_log)

        result.hmi_records = hmi_writer.records
        result.plc_records = plc_writer.records
        result.grid_log = grid_log
        result.view_log = view_log
        result.operator_log = operator_log
        result.counters = {
            "fleet": fleet.status(),
            "proxy": proxy.status() if proxy else {},
            "hmi": master.counters() if master else {},
        }
        run_meta = {
            "scenario": scenario.as_dict(),
            "outcome": outcome,
            "started_wall": started_wall,
            "real_seconds": round(time.time() - started_wall, 3),
            "ports": port_map,
            "operator": operator_log,
            "counters": result.counters,
        }
        with open(result.run_meta, "w", encoding="utf-8") as fh:
            json.dump(run_meta, fh, indent=2)
            fh.write("\n")

        result.report = rpt.deception_report(
            result.hmi_records, result.plc_records, grid_log,
            windows=scenario.windows, scenario=scenario.name)
        with open(result.report_path, "w", encoding="utf-8") as fh:
            json.dump(result.report, fh, indent=2)
            fh.write("\n")
    return result


async def _serve_api(app, host: str, port: int):
    import uvicorn

    server = uvicorn.Server(uvicorn.Config(
        app, host=host, port=port, log_level="warning"))
    task = asyncio.create_task(server.serve())
    while not server.started and not task.done():
        await asyncio.sleep(0.01)
    if task.done():
        raise RunError(f"console API server failed to start on port {port}")
    return server, task


async def _operator_script(scenario: Scenario, clock: ScenarioClock,
                           app, operator_log: List[dict]) -> None:
    if not scenario.operator:
        return
    transport = httpx.ASGITransport(app=app)
    async with httpx.AsyncClient(transport=transport,
                                 base_url="http://console") as client:
        for step in scenario.operator:
            await clock.sleep_until(step.time)
            entry = {"t": round(clock.now(), 6), "rtu": step.rtu,
                     "action": step.action}
            try:
                response = await client.post(
                    "/api/command",
                    json={"rtu": step.rtu, "action": step.action,
                          "origin": "operator-script"})
                entry["http_status"] = response.status_code
                entry["result"] = response.json()
            except Exception as e:  # keep the run alive; the log shows it
                entry["error"] = repr(e)
            operator_log.append(entry)


def run_scenario_sync(scenario: Scenario, out_dir: str, *,
                      host: str = "127.0.0.1") -> RunResult:
    return asyncio.run(run_scenario(scenario, out_dir, host=host))
