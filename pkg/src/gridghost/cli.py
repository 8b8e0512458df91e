"""Command-line entry points: scenario runner, attack proxy, detector."""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import yaml

from . import detector as det
from . import iaml
from . import proxy as prx
from . import report as rpt
from .capture import read_capture
from .harness import RunError, run_scenario
from .scenario import ScenarioError, load_scenario

log = logging.getLogger(__name__)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# --- gridghost -------------------------------------------------------------

def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridghost",
        description="simulated distribution-grid SCADA testbed with a "
                    "rewriting man-in-the-middle and an anomaly detector")
    sub = parser.add_subparsers(dest="cmd", required=True)

    run_p = sub.add_parser("run", help="execute a scenario, write run artifacts")
    run_p.add_argument("scenario", help="scenario YAML file")
    run_p.add_argument("--out-dir", help="run directory (default runs/<name>-<stamp>)")
    run_p.add_argument("--time-scale", type=float,
                       help="override the scenario's time scale")
    run_p.add_argument("--api-port", type=int,
                       help="also serve the live console API on this port")
    run_p.add_argument("--host", default="127.0.0.1")

    plot_p = sub.add_parser("plot", help="flatten a capture to CSV for plotting")
    plot_p.add_argument("capture", help="capture JSONL file")
    plot_p.add_argument("--out", required=True, help="CSV output path")
    plot_p.add_argument("--register", type=int, default=130,
                        help="start address of the read window (default 130)")

    rep_p = sub.add_parser("report",
                           help="recompute the deception report for a run")
    rep_p.add_argument("run_dir", help="directory written by gridghost run")

    args = parser.parse_args(argv)
    if args.cmd == "run":
        return _cmd_run(args)
    if args.cmd == "plot":
        return _cmd_plot(args)
    return _cmd_report(args)


def _cmd_run(args) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        scenario = load_scenario(args.scenario, time_scale=args.time_scale)
    except (OSError, ScenarioError, yaml.YAMLError) as e:
        return _fail(str(e))
    if args.api_port is not None:
        scenario = dataclasses.replace(scenario, api_port=args.api_port)

    out_dir = args.out_dir or str(
        Path("runs") / f"{scenario.name}-{time.strftime('%Y%m%d-%H%M%S')}")
    print(f"running scenario {scenario.name!r}: {scenario.duration} s at "
          f"{scenario.time_scale}x -> {out_dir}")
    try:
        result = asyncio.run(run_scenario(scenario, out_dir, host=args.host))
    except RunError as e:
        return _fail(str(e))

    report = result.report
    print(f"captured {len(result.hmi_records)} console-side and "
          f"{len(result.plc_records)} plc-side frames")
    for window in report["per_window"]:
        print(f"window {window['window']}: max display error "
              f"{window['max_delta_centi'] / 100:.2f}")
    for row in report["commands"]:
        mark = "REVERSED" if row["reversed"] else "as intended"
        print(f"command t={row['t']:.1f} {row['rtu']} intended "
              f"{row['intended']} executed {row['executed']} ({mark})")
    print(f"blackout verdict: {report['blackout']['verdict']}")
    print(f"artifacts in {result.out_dir}")
    return 0


def _cmd_plot(args) -> int:
    try:
        _, records = read_capture(args.capture)
    except (OSError, json.JSONDecodeError) as e:
        return _fail(str(e))
    rows = rpt.emit_timeseries(records, args.out, start_address=args.register)
    print(f"wrote {rows} rows to {args.out}")
    return 0


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        meta = json.loads((run_dir / "run.json").read_text())
        _, hmi = read_capture(str(run_dir / "hmi_side.jsonl"))
        _, plc = read_capture(str(run_dir / "plc_side.jsonl"))
        grid_log = [json.loads(line) for line in
                    (run_dir / "grid_log.jsonl").read_text().splitlines()]
    except (OSError, json.JSONDecodeError) as e:
        return _fail(str(e))
    scenario = meta.get("scenario", {})
    windows = scenario.get("windows")
    report = rpt.deception_report(
        hmi, plc, grid_log,
        windows=[tuple(w) for w in windows] if windows else None,
        scenario=scenario.get("name"))
    (run_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report, indent=2))
    return 0


# --- attack-proxy ----------------------------------------------------------

def proxy_main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="attack-proxy",
        description="man-in-the-middle Modbus/TCP rewriting proxy")
    parser.add_argument("--config", required=True,
                        help="endpoint layout YAML (host, ports, rtus)")
    parser.add_argument("--iaml", help="attack rule script; omit for a "
                                       "transparent relay")
    parser.add_argument("--half-duplex", action="store_true",
                        help="never touch PLC-to-HMI traffic")
    parser.add_argument("--listen-base", type=int,
                        help="override the configured listen base port")
    parser.add_argument("--status-port", type=int,
                        help="serve JSON channel status on this port")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        channels = load_proxy_channels(args.config, listen_base=args.listen_base)
        rules = iaml.parse_file(args.iaml) if args.iaml else []
    except (OSError, iaml.IamlError, yaml.YAMLError, KeyError, ValueError) as e:
        return _fail(str(e))

    proxy = prx.AttackProxy(channels, rules, half_duplex=args.half_duplex)
    try:
        asyncio.run(_proxy_serve(proxy, channels, args.status_port))
    except KeyboardInterrupt:
        print("\nstopping")
    return 0


def load_proxy_channels(config_path: str, *,
                        listen_base: Optional[int] = None) -> List[prx.ChannelConfig]:
    with open(config_path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    host = doc.get("host", "127.0.0.1")
    plc_base = int(doc["plc_base_port"])
    base = int(listen_base if listen_base is not None
               else doc.get("listen_base_port", prx.DEFAULT_LISTEN_BASE))
    channels = []
    for rtu in doc["rtus"]:
        index = int(str(rtu).split("_")[1])
        channels.append(prx.ChannelConfig(
            rtu_id=str(rtu), listen_host=host, listen_port=base + index,
            upstream_host=host, upstream_port=plc_base + index,
            identity=str(rtu)))
    return channels


async def _proxy_serve(proxy: prx.AttackProxy, channels, status_port) -> None:
    await proxy.start()
    status_server = None
    if status_port is not None:
        status_server = await _serve_status(proxy, channels[0].listen_host,
                                            status_port)
    for c in channels:
        log.info("%s: %s:%d -> %s:%d", c.rtu_id, c.listen_host,
                 proxy.bound_port(c.rtu_id), c.upstream_host, c.upstream_port)
    log.info("%d channels up, %d rules loaded%s", len(channels),
             len(proxy.rules), " (half-duplex)" if proxy.half_duplex else "")
    try:
        await asyncio.Event().wait()
    finally:
        if status_server is not None:
            status_server.close()
            await status_server.wait_closed()
        await proxy.stop()


async def _serve_status(proxy: prx.AttackProxy, host: str, port: int):
    async def handle(reader: asyncio.StreamReader,
                     writer: asyncio.StreamWriter) -> None:
        try:
            await reader.readline()
            body = json.dumps(proxy.status()).encode()
            writer.write(b"HTTP/1.1 200 OK\r\n"
                         b"Content-Type: application/json\r\n"
                         b"Content-Length: " + str(len(body)).encode() +
                         b"\r\nConnection: close\r\n\r\n" + body)
            await writer.drain()
        except (ConnectionResetError, BrokenPipeError):
            pass
        finally:
            try:
                writer.close()
            except Exception:
                pass

    return await asyncio.start_server(handle, host, port)


# --- detector --------------------------------------------------------------

def detector_main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="detector",
        description="cyclic-DFA protocol anomaly detector for captures")
    sub = parser.add_subparsers(dest="cmd", required=True)

    learn_p = sub.add_parser("learn", help="learn per-channel cycles from a "
                                           "clean capture")
    learn_p.add_argument("capture", help="capture JSONL file")
    learn_p.add_argument("--out", required=True, help="model JSON output path")
    learn_p.add_argument("--whitelist-function", type=int, action="append",
                         help="function codes treated as known but acyclic "
                              "(default: 5)")

    cls_p = sub.add_parser("classify", help="classify a capture against a model")
    cls_p.add_argument("capture", help="capture JSONL file")
    cls_p.add_argument("--model", required=True, help="model JSON from learn")
    cls_p.add_argument("--out", help="also write the report JSON here")

    args = parser.parse_args(argv)
    if args.cmd == "learn":
        return _cmd_learn(args)
    return _cmd_classify(args)


def _cmd_learn(args) -> int:
    try:
        _, records = read_capture(args.capture)
    except (OSError, json.JSONDecodeError) as e:
        return _fail(str(e))
    whitelist = frozenset(args.whitelist_function
                          if args.whitelist_function is not None else [5])
    try:
        model = det.learn_capture(records, whitelist_functions=whitelist)
    except det.LearnError as e:
        return _fail(str(e))
    det.save_model(model, args.out)
    for channel in sorted(model):
        print(f"{channel}: cycle of {len(model[channel].cycle)} symbols")
    print(f"model written to {args.out}")
    return 0


def _cmd_classify(args) -> int:
    try:
        model = det.load_model(args.model)
        meta, records = read_capture(args.capture)
    except (OSError, json.JSONDecodeError, KeyError) as e:
        return _fail(str(e))
    try:
        events = det.classify_capture(records, model)
    except KeyError as e:
        return _fail(str(e))
    report = det.anomaly_report(events, meta.get("segment", "unknown"))
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    anomalies = (report["counts"][det.UNKNOWN_SYMBOL]
                 + report["counts"][det.OUT_OF_ORDER])
    return 1 if anomalies else 0
