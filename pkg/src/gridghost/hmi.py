"""HMI master: polls the PLC fleet, keeps the operator view, runs the API.

Two polling loops partition the fleet (loop A: the top line RTU_01-06,
loop B: everything else) and each owns its PLCs' connections outright, so
commands travel on the same connection as that PLC's polls. Every cycle a
PLC gets the same three reads: current+voltage (#130 x2), breaker state
(#1), diagnostics (#200 x4). The view renders exactly the last decoded
responses; a timed-out poll leaves current/voltage absent and the breaker
unknown until a later cycle succeeds.

The HTTP/WS API on top is the only way anything commands a switch: GET
/api/state for snapshots, POST /api/command for open/close, WS /api/stream
for ordered view deltas and command acknowledgements.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from fastapi import FastAPI, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse

from . import modbus as mb
from .clock import ScenarioClock

log = logging.getLogger(__name__)

POLL_READS = ((130, 2), (1, 1), (200, 4))
DEFAULT_POLL_PERIOD = 0.5
DEFAULT_RESPONSE_TIMEOUT = 1.0

LOOP_A = [f"RTU_{i:02d}" for i in range(1, 7)]
LOOP_B = [f"RTU_{i:02d}" for i in range(7, 12)]

OPEN = "open"
CLOSED = "closed"
UNKNOWN = "unknown"


@dataclass
class RtuView:
    current: Optional[float] = None
    voltage: Optional[float] = None
    breaker: str = UNKNOWN
    last_good: Optional[float] = None

    def as_dict(self) -> dict:
        return {
            "current": self.current,
            "voltage": self.voltage,
            "breaker": self.breaker,
            "last_good": self.last_good,
        }


@dataclass
class Endpoint:
    host: str
    port: int
    unit_id: int


class PlcLink:
    """One TCP connection to one PLC, owned by a single polling loop."""

    def __init__(self, rtu_id: str, endpoint: Endpoint, clock: ScenarioClock,
                 response_timeout: float):
        self.rtu_id = rtu_id
        self.endpoint = endpoint
        self.clock = clock
        self.response_timeout = response_timeout
        self.reader: Optional[asyncio.StreamReader] = None
        self.writer: Optional[asyncio.StreamWriter] = None
        self.buffer = b""
        self._tid = 0
        self.counters = {"exchanges": 0, "timeouts": 0, "protocol_errors": 0,
                         "reconnects": 0, "connect_failures": 0}

    def next_tid(self) -> int:
        self._tid = (self._tid + 1) % 0x10000
        return self._tid

    @property
    def connected(self) -> bool:
        return self.writer is not None

    async def ensure_connected(self) -> bool:
        if self.connected:
            return True
        try:
            self.reader, self.writer = await asyncio.open_connection(
                self.endpoint.host, self.endpoint.port)
            self.buffer = b""
            self.counters["reconnects"] += 1
            return True
        except OSError:
            self.counters["connect_failures"] += 1
            self.reader = self.writer = None
            return False

    def drop(self) -> None:
        if self.writer is not None:
            try:
                self.writer.close()
            except Exception:
                pass
        self.reader = self.writer = None
        self.buffer = b""

    async def exchange(self, frame: mb.ModbusFrame) -> Optional[mb.ModbusFrame]:
        """Send one request, wait for the response with a matching TID.

        Returns None on timeout or connection failure. Responses with a
        stale TID are discarded and counted as protocol errors.
        """
        if not await self.ensure_connected():
            return None
        self.counters["exchanges"] += 1
        raw = mb.encode_frame(frame)
        try:
            self.writer.write(raw)
            await self.writer.drain()
            return await self.clock.wait_for(
                self._read_matching(frame.tid), self.response_timeout)
        except asyncio.TimeoutError:
            self.counters["timeouts"] += 1
            return None
        except (ConnectionError, OSError):
            self.drop()
            return None

    async def _read_matching(self, tid: int) -> mb.ModbusFrame:
        while True:
            try:
                frames, self.buffer = mb.decode_stream(self.buffer)
            except mb.FramingError:
                self.counters["protocol_errors"] += 1
                self.drop()
                raise ConnectionError("frame desync")
            for f in frames:
                if f.tid == tid:
                    return f
                self.counters["protocol_errors"] += 1  # stale or foreign TID
            data = await self.reader.read(4096)
            if not data:
                self.drop()
                raise ConnectionError("peer closed")
            self.buffer += data


@dataclass
class _QueuedCommand:
    rtu_id: str
    action: str
    origin: str
    issued_at: float
    future: asyncio.Future = field(repr=False, default=None)


class HmiMaster:
    def __init__(self, endpoints: Dict[str, Endpoint], *,
                 clock: Optional[ScenarioClock] = None,
                 poll_period: float = DEFAULT_POLL_PERIOD,
                 response_timeout: float = DEFAULT_RESPONSE_TIMEOUT,
                 loop_a: Optional[List[str]] = None,
                 loop_b: Optional[List[str]] = None,
                 on_event: Optional[Callable[[dict], None]] = None):
        self.endpoints = endpoints
        self.clock = clock or ScenarioClock()
        self.poll_period = poll_period
        self.response_timeout = response_timeout
        self.loop_a = [r for r in (loop_a or LOOP_A) if r in endpoints]
        self.loop_b = [r for r in (loop_b or LOOP_B) if r in endpoints]
        self.on_event = on_event
        self.view: Dict[str, RtuView] = {r: RtuView() for r in endpoints}
        self.links = {
            r: PlcLink(r, endpoints[r], self.clock, response_timeout)
            for r in endpoints}
        self._queues: Dict[str, List[_QueuedCommand]] = {r: [] for r in endpoints}
        self._wake = {"a": asyncio.Event(), "b": asyncio.Event()}
        self._subscribers: List[asyncio.Queue] = []
        self._tasks: List[asyncio.Task] = []
        self._seq = 0
        self._stopping = False
        self.started = asyncio.Event()

    # --- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        self._tasks = [
            asyncio.create_task(self._poll_loop("a", self.loop_a)),
            asyncio.create_task(self._poll_loop("b", self.loop_b)),
        ]
        self.started.set()

    async def stop(self) -> None:
        # belt and braces: cancellation through wait_for can be lost on
        # 3.10 when the awaited event fires concurrently, so the loops
        # also watch this flag
        self._stopping = True
        for wake in self._wake.values():
            wake.set()
        for task in self._tasks:
            task.cancel()
        await asyncio.gather(*self._tasks, return_exceptions=True)
        for link in self.links.values():
            link.drop()

    # --- events ------------------------------------------------------------

    def _emit(self, event: dict) -> None:
        self._seq += 1
        event["seq"] = self._seq
        if self.on_event:
            self.on_event(event)
        for q in list(self._subscribers):
            q.put_nowait(event)

    def subscribe(self) -> asyncio.Queue:
        q: asyncio.Queue = asyncio.Queue()
        self._subscribers.append(q)
        return q

    def unsubscribe(self, q: asyncio.Queue) -> None:
        if q in self._subscribers:
            self._subscribers.remove(q)

    # --- polling -----------------------------------------------------------

    async def _poll_loop(self, loop_id: str, rtus: List[str]) -> None:
        wake = self._wake[loop_id]
        cycle_start = self.clock.now()
        while not self._stopping:
            for rtu in rtus:
                await self._drain_commands(rtu)
                await self._poll_one(rtu)
            for rtu in rtus:
                await self._drain_commands(rtu)
            next_cycle = cycle_start + self.poll_period
            while not self._stopping:
                remaining = next_cycle - self.clock.now()
                if remaining <= 0:
                    break
                try:
                    await self.clock.wait_for(wake.wait(), remaining)
                except asyncio.TimeoutError:
                    break
                wake.clear()
                if self._stopping:
                    return
                for rtu in rtus:
                    await self._drain_commands(rtu)
            cycle_start = max(next_cycle, self.clock.now() - self.poll_period)

    async def _poll_one(self, rtu: str) -> None:
        link = self.links[rtu]
        view = self.view[rtu]
        results = []
        for start, count in POLL_READS:
            frame = mb.read_request(link.next_tid(), link.endpoint.unit_id, start, count)
            resp = await link.exchange(frame)
            if resp is not None and mb.classify(resp, mb.Direction.RESPONSE) \
                    is mb.MessageKind.READ_RESPONSE:
                results.append(mb.parse_read_response(resp).values)
            else:
                results.append(None)
        new = RtuView(current=view.current, voltage=view.voltage,
                      breaker=view.breaker, last_good=view.last_good)
        if results[0] is not None and len(results[0]) == 2:
            new.current = results[0][0] / 100
            new.voltage = results[0][1] / 100
        else:
            new.current = None
            new.voltage = None
        if results[1] is not None and len(results[1]) == 1:
            new.breaker = CLOSED if results[1][0] else OPEN
        else:
            new.breaker = UNKNOWN
        if all(r is not None for r in results):
            new.last_good = self.clock.now()
        changed = (new.current, new.voltage, new.breaker) != (
            view.current, view.voltage, view.breaker)
        self.view[rtu] = new
        if changed:
            self._emit({"type": "view", "t": round(self.clock.now(), 3), "rtu": rtu,
                        **{k: v for k, v in new.as_dict().items() if k != "last_good"}})

    # --- commands ----------------------------------------------------------

    async def _drain_commands(self, rtu: str) -> None:
        while self._queues[rtu]:
            cmd = self._queues[rtu].pop(0)
            result = await self._send_command(cmd)
            if not cmd.future.done():
                cmd.future.set_result(result)
            self._emit({"type": "command_result", "t": round(self.clock.now(), 3),
                        "rtu": cmd.rtu_id, "action": cmd.action, "origin": cmd.origin,
                        **result})

    async def _send_command(self, cmd: _QueuedCommand) -> dict:
        link = self.links[cmd.rtu_id]
        frame = mb.write_coil(link.next_tid(), link.endpoint.unit_id, 0,
                              on=(cmd.action == "close"))
        sent = mb.encode_frame(frame)
        resp = await link.exchange(frame)
        if resp is None:
            return {"status": "failed", "reason": "timeout"}
        if mb.encode_frame(resp) != sent:
            return {"status": "failed", "reason": "echo mismatch"}
        return {"status": "confirmed"}

    async def command(self, rtu: str, action: str, origin: str = "api") -> dict:
        if rtu not in self.endpoints:
            return {"status": "rejected", "reason": f"unknown rtu {rtu!r}"}
        if action not in (OPEN, "close"):
            return {"status": "rejected", "reason": f"unknown action {action!r}"}
        cmd = _QueuedCommand(rtu_id=rtu, action=action, origin=origin,
                             issued_at=self.clock.now(),
                             future=asyncio.get_running_loop().create_future())
        self._queues[rtu].append(cmd)
        loop_id = "a" if rtu in self.loop_a else "b"
        self._wake[loop_id].set()
        try:
            result = await self.clock.wait_for(
                cmd.future, self.poll_period + 2 * self.response_timeout + 2.0)
        except asyncio.TimeoutError:
            return {"status": "failed", "reason": "command queue stalled"}
        return dict(result)

    # --- snapshots ---------------------------------------------------------

    def snapshot(self) -> dict:
        now = self.clock.now()
        rtus = {}
        for rtu, view in self.view.items():
            entry = view.as_dict()
            entry["stale_for"] = (
                round(now - view.last_good, 3) if view.last_good is not None else None)
            rtus[rtu] = entry
        return {"t": round(now, 3), "rtus": rtus, "counters": self.counters()}

    def counters(self) -> dict:
        return {r: dict(link.counters) for r, link in self.links.items()}


def build_api(master: HmiMaster) -> FastAPI:
    app = FastAPI(title="operator console API", docs_url=None, redoc_url=None)

    @app.get("/api/state")
    async def state():
        return master.snapshot()

    @app.post("/api/command")
    async def command(body: dict):
        rtu = body.get("rtu")
        action = body.get("action")
        if not isinstance(rtu, str) or not isinstance(action, str):
            return JSONResponse({"status": "rejected",
                                 "reason": "body needs rtu and action strings"},
                                status_code=400)
        result = await master.command(rtu, action, origin=body.get("origin", "api"))
        code = 200 if result["status"] == "confirmed" else (
            400 if result["status"] == "rejected" else 502)
        return JSONResponse(result, status_code=code)

    @app.websocket("/api/stream")
    async def stream(ws: WebSocket):
        await ws.accept()
        q = master.subscribe()
        try:
            await ws.send_json({"type": "hello", "state": master.snapshot()})
            while True:
                event = await q.get()
                await ws.send_json(event)
        except WebSocketDisconnect:
            pass
        finally:
            master.unsubscribe(q)

    return app
