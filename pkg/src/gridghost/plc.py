"""Simulated switchgear PLC fleet: one Modbus/TCP server per RTU.

Each PLC accepts a single TCP connection at a time, answers register reads
from the latest grid snapshot, and forwards breaker commands to the grid
owner. Register layout per RTU:

    #1        breaker state mirror (1 closed, 0 open)
    #130      line current, amperes x100
    #131      line voltage, kV x100
    #132      always 0
    #200-#203 static diagnostics

The fleet binds one port per RTU (base + index) on one host instead of
eleven addresses on port 502, so it runs unprivileged; the mapping is
configuration.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

from . import grid as gr
from . import modbus as mb

log = logging.getLogger(__name__)

DEFAULT_BASE_PORT = 15020
RTU_IDS = [f"RTU_{i:02d}" for i in range(1, 12)]

BREAKER_COIL = 0


def rtu_index(rtu_id: str) -> int:
    return int(rtu_id.split("_")[1])


@dataclass(frozen=True)
class PlcConfig:
    rtu_id: str
    port: int
    unit_id: int
    host: str = "127.0.0.1"

    @property
    def identity(self) -> str:
        return f"{self.host}:{self.port}"


def default_fleet_config(base_port: int = DEFAULT_BASE_PORT,
                         host: str = "127.0.0.1") -> List[PlcConfig]:
    return [
        PlcConfig(rtu_id=r, port=base_port + rtu_index(r), unit_id=rtu_index(r), host=host)
        for r in RTU_IDS
    ]


def register_map(rtu_id: str, unit_id: int, state: gr.GridState) -> Dict[int, int]:
    return {
        1: 1 if state.closed[rtu_id] else 0,
        130: state.currents_centi[rtu_id],
        131: state.voltages_centi[rtu_id],
        132: 0,
        200: unit_id,
        201: 1,  # device status word, always healthy here
        202: 0,
        203: 0,
    }


class PlcServer:
    """One RTU endpoint; at most one live connection."""

    def __init__(self, config: PlcConfig, grid: gr.Grid):
        self.config = config
        self.grid = grid
        self._server: Optional[asyncio.base_events.Server] = None
        self._active = False
        self.counters = {"served": 0, "exceptions": 0, "refused": 0, "framing_errors": 0}

    @property
    def bound_port(self) -> int:
        if self._server is None:
            raise RuntimeError("server not started")
        return self._server.sockets[0].getsockname()[1]

    async def start(self) -> None:
        self._server = await asyncio.start_server(
            self._handle, host=self.config.host, port=self.config.port)

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
            self._server = None

    async def _handle(self, reader: asyncio.StreamReader,
                      writer: asyncio.StreamWriter) -> None:
        if self._active:
            # single-connection policy: the newcomer is turned away
            self.counters["refused"] += 1
            writer.close()
            return
        self._active = True
        buffer = b""
        try:
            while True:
                data = await reader.read(4096)
                if not data:
                    break
                buffer += data
                try:
                    frames, buffer = mb.decode_stream(buffer)
                except mb.FramingError as e:
                    log.warning("%s: dropping connection: %s", self.config.rtu_id, e)
                    self.counters["framing_errors"] += 1
                    break
                for frame in frames:
                    response = self.serve_frame(frame)
                    writer.write(mb.encode_frame(response))
                await writer.drain()
        except (ConnectionResetError, BrokenPipeError):
            pass
        finally:
            self._active = False
            writer.close()

    def serve_frame(self, frame: mb.ModbusFrame) -> mb.ModbusFrame:
        """Pure request -> response mapping; grid writes as a side effect."""
        self.counters["served"] += 1
        fn = frame.function
        if fn == mb.READ_HOLDING_REGISTERS:
            try:
                req = mb.parse_read_request(frame)
            except mb.ClassifyError:
                return self._exception(frame, mb.EXC_ILLEGAL_VALUE)
            regs = register_map(self.config.rtu_id, self.config.unit_id, self.grid.state)
            span = range(req.start_address, req.start_address + req.word_count)
            if any(a not in regs for a in span):
                return self._exception(frame, mb.EXC_ILLEGAL_ADDRESS)
            return mb.read_response(frame.tid, frame.unit_id, [regs[a] for a in span])
        if fn == mb.WRITE_SINGLE_COIL:
            try:
                cmd = mb.parse_write_coil(frame)
            except mb.ClassifyError:
                return self._exception(frame, mb.EXC_ILLEGAL_VALUE)
            if cmd.coil_address != BREAKER_COIL:
                return self._exception(frame, mb.EXC_ILLEGAL_ADDRESS)
            try:
                self.grid.set_switch(self.config.rtu_id, close=(cmd.value == mb.COIL_ON))
            except gr.LoopError:
                # command acknowledged but protection holds the switch open;
                # the grid owner has already logged the rejection
                pass
            return frame  # function 5 echoes the request verbatim
        return self._exception(frame, mb.EXC_ILLEGAL_FUNCTION)

    def _exception(self, frame: mb.ModbusFrame, code: int) -> mb.ModbusFrame:
        self.counters["exceptions"] += 1
        return mb.exception_response(frame.tid, frame.unit_id, frame.function, code)


class Fleet:
    """All PLC servers over one shared grid."""

    def __init__(self, grid: Optional[gr.Grid] = None,
                 configs: Optional[List[PlcConfig]] = None):
        self.grid = grid or gr.Grid()
        self.configs = configs or default_fleet_config()
        self.servers = {c.rtu_id: PlcServer(c, self.grid) for c in self.configs}

    async def start(self) -> None:
        await asyncio.gather(*(s.start() for s in self.servers.values()))

    async def stop(self) -> None:
        await asyncio.gather(*(s.stop() for s in self.servers.values()))

    def endpoints(self) -> Dict[str, PlcConfig]:
        return {c.rtu_id: c for c in self.configs}

    def status(self) -> Dict[str, Dict[str, int]]:
        return {r: dict(s.counters) for r, s in self.servers.items()}
