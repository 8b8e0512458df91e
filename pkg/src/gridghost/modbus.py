"""Modbus/TCP framing: MBAP header, PDU encode/decode, stream reassembly.

TCP is a stream, so frames arrive split or coalesced; decode_stream keeps a
remainder buffer and cuts frames on the MBAP length field. All multi-byte
fields are big-endian. Only the function codes the testbed speaks are
accepted: 3 (read holding registers), 5 (write single coil), 6 (write single
register), plus their exception forms (function | 0x80).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Tuple

MBAP_SIZE = 7
MAX_PAYLOAD = 252

READ_HOLDING_REGISTERS = 3
WRITE_SINGLE_COIL = 5
WRITE_SINGLE_REGISTER = 6
SUPPORTED_FUNCTIONS = frozenset(
    {READ_HOLDING_REGISTERS, WRITE_SINGLE_COIL, WRITE_SINGLE_REGISTER}
)

COIL_ON = 0xFF00
COIL_OFF = 0x0000

EXC_ILLEGAL_FUNCTION = 0x01
EXC_ILLEGAL_ADDRESS = 0x02
EXC_ILLEGAL_VALUE = 0x03


class FramingError(ValueError):
    """Bytes that cannot be (de)framed; offset points at the broken frame."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ClassifyError(ValueError):
    pass


class Direction(Enum):
    QUERY = "query"        # master -> slave
    RESPONSE = "response"  # slave -> master


class MessageKind(Enum):
    READ_REQUEST = "read-request"
    READ_RESPONSE = "read-response"
    WRITE_COIL_REQUEST = "write-coil-request"
    WRITE_COIL_RESPONSE = "write-coil-response"
    EXCEPTION = "exception"
    OTHER = "other"


@dataclass(frozen=True)
class MbapHeader:
    tid: int
    length: int     # byte count of unit id + PDU
    unit_id: int
    protocol_id: int = 0


@dataclass(frozen=True)
class ModbusFrame:
    header: MbapHeader
    function: int
    payload: bytes

    @property
    def tid(self) -> int:
        return self.header.tid

    @property
    def unit_id(self) -> int:
        return self.header.unit_id


@dataclass(frozen=True)
class ReadRequest:
    start_address: int
    word_count: int


@dataclass(frozen=True)
class ReadResponse:
    byte_count: int
    values: Tuple[int, ...]


@dataclass(frozen=True)
class WriteSingleCoil:
    coil_address: int
    value: int  # COIL_ON or COIL_OFF


@dataclass(frozen=True)
class WriteSingleRegister:
    address: int
    value: int


def _check_u16(value: int, name: str) -> None:
    if not 0 <= value <= 0xFFFF:
        raise ValueError(f"{name} {value} out of 16-bit range")


def _function_ok(function: int) -> bool:
    if function & 0x80:
        return (function & 0x7F) in SUPPORTED_FUNCTIONS
    return function in SUPPORTED_FUNCTIONS


def make_frame(tid: int, unit_id: int, function: int, payload: bytes) -> ModbusFrame:
    """Build a frame with a consistent MBAP length field."""
    header = MbapHeader(tid=tid, length=2 + len(payload), unit_id=unit_id)
    return ModbusFrame(header=header, function=function, payload=bytes(payload))


def read_request(tid: int, unit_id: int, start: int, count: int) -> ModbusFrame:
    if not 1 <= count <= 125:
        raise ValueError(f"word count {count} outside 1..125")
    return make_frame(tid, unit_id, READ_HOLDING_REGISTERS, struct.pack(">HH", start, count))


def read_response(tid: int, unit_id: int, values: Iterable[int]) -> ModbusFrame:
    vals = list(values)
    payload = bytes([2 * len(vals)]) + b"".join(struct.pack(">H", v) for v in vals)
    return make_frame(tid, unit_id, READ_HOLDING_REGISTERS, payload)


def write_coil(tid: int, unit_id: int, address: int, on: bool) -> ModbusFrame:
    value = COIL_ON if on else COIL_OFF
    return make_frame(tid, unit_id, WRITE_SINGLE_COIL, struct.pack(">HH", address, value))


def write_register(tid: int, unit_id: int, address: int, value: int) -> ModbusFrame:
    return make_frame(tid, unit_id, WRITE_SINGLE_REGISTER, struct.pack(">HH", address, value))


def exception_response(tid: int, unit_id: int, function: int, code: int) -> ModbusFrame:
    return make_frame(tid, unit_id, (function & 0x7F) | 0x80, bytes([code]))


def encode_frame(frame: ModbusFrame) -> bytes:
    """Serialize to wire bytes: 7-byte MBAP, function byte, payload."""
    h = frame.header
    _check_u16(h.tid, "tid")
    if h.protocol_id != 0:
        raise ValueError(f"protocol id must be 0, got {h.protocol_id}")
    if not 0 <= h.unit_id <= 0xFF:
        raise ValueError(f"unit id {h.unit_id} out of 8-bit range")
    if len(frame.payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(frame.payload)} bytes exceeds {MAX_PAYLOAD}")
    if h.length != 2 + len(frame.payload):
        raise ValueError(
            f"length field {h.length} inconsistent with payload of {len(frame.payload)} bytes"
        )
    if not _function_ok(frame.function):
        raise ValueError(f"unsupported function code 0x{frame.function:02x}")
    return (
        struct.pack(">HHHB", h.tid, 0, h.length, h.unit_id)
        + bytes([frame.function])
        + frame.payload
    )


def iter_frames(buffer: bytes) -> Tuple[List[Tuple[ModbusFrame, bytes]], bytes]:
    """Cut complete frames off the front of buffer.

    Returns ([(frame, raw_bytes)], remainder). Raises FramingError on a
    malformed header; the offset names the start of the offending frame.
    """
    out: List[Tuple[ModbusFrame, bytes]] = []
    pos = 0
    n = len(buffer)
    while n - pos >= MBAP_SIZE:
        tid, pid, length, unit_id = struct.unpack(">HHHB", buffer[pos : pos + 7])
        if pid != 0:
            raise FramingError(f"protocol id must be 0, got {pid}", offset=pos)
        if not 2 <= length <= 2 + MAX_PAYLOAD + 1:
            raise FramingError(f"implausible length field {length}", offset=pos)
        total = 6 + length
        if n - pos < total:
            break
        function = buffer[pos + 7]
        if not _function_ok(function):
            raise FramingError(f"unsupported function code 0x{function:02x}", offset=pos)
        payload = bytes(buffer[pos + 8 : pos + total])
        frame = ModbusFrame(
            header=MbapHeader(tid=tid, length=length, unit_id=unit_id),
            function=function,
            payload=payload,
        )
        out.append((frame, bytes(buffer[pos : pos + total])))
        pos += total
    return out, bytes(buffer[pos:])


def decode_stream(buffer: bytes) -> Tuple[List[ModbusFrame], bytes]:
    """Decode zero or more complete frames; remainder holds any partial tail."""
    pairs, remainder = iter_frames(buffer)
    return [f for f, _ in pairs], remainder


def parse_read_request(frame: ModbusFrame) -> ReadRequest:
    if len(frame.payload) != 4:
        raise ClassifyError(f"read request payload must be 4 bytes, got {len(frame.payload)}")
    start, count = struct.unpack(">HH", frame.payload)
    return ReadRequest(start_address=start, word_count=count)


def parse_read_response(frame: ModbusFrame) -> ReadResponse:
    p = frame.payload
    if not p or len(p) != 1 + p[0] or p[0] % 2 != 0:
        raise ClassifyError(f"malformed read response payload of {len(p)} bytes")
    values = struct.unpack(f">{p[0] // 2}H", p[1:])
    return ReadResponse(byte_count=p[0], values=values)


def parse_write_coil(frame: ModbusFrame) -> WriteSingleCoil:
    if len(frame.payload) != 4:
        raise ClassifyError("write-coil payload must be 4 bytes")
    address, value = struct.unpack(">HH", frame.payload)
    if value not in (COIL_ON, COIL_OFF):
        raise ClassifyError(f"coil value 0x{value:04x} not 0xFF00/0x0000")
    return WriteSingleCoil(coil_address=address, value=value)


def parse_write_register(frame: ModbusFrame) -> WriteSingleRegister:
    if len(frame.payload) != 4:
        raise ClassifyError("write-register payload must be 4 bytes")
    address, value = struct.unpack(">HH", frame.payload)
    return WriteSingleRegister(address=address, value=value)


def parse_exception(frame: ModbusFrame) -> int:
    if len(frame.payload) != 1:
        raise ClassifyError("exception payload must be 1 byte")
    return frame.payload[0]


def classify(frame: ModbusFrame, direction: Optional[Direction] = None) -> MessageKind:
    """Classify a decoded frame; fn-3 and fn-5 shapes may need direction.

    A read request payload is exactly 4 bytes while a read response is
    1 + byte_count bytes with an even byte count, so the two never truly
    collide; write-coil requests and their echoes are byte-identical and
    require direction metadata.
    """
    fn = frame.function
    if fn & 0x80:
        return MessageKind.EXCEPTION
    if fn == READ_HOLDING_REGISTERS:
        p = frame.payload
        req_ok = len(p) == 4
        resp_ok = bool(p) and len(p) == 1 + p[0] and p[0] % 2 == 0
        if direction is Direction.QUERY:
            if req_ok:
                return MessageKind.READ_REQUEST
            raise ClassifyError("query-direction fn-3 frame is not a valid read request")
        if direction is Direction.RESPONSE:
            if resp_ok:
                return MessageKind.READ_RESPONSE
            raise ClassifyError("response-direction fn-3 frame is not a valid read response")
        if req_ok and not resp_ok:
            return MessageKind.READ_REQUEST
        if resp_ok and not req_ok:
            return MessageKind.READ_RESPONSE
        raise ClassifyError("ambiguous fn-3 shape without direction metadata")
    if fn == WRITE_SINGLE_COIL:
        if direction is Direction.QUERY:
            return MessageKind.WRITE_COIL_REQUEST
        if direction is Direction.RESPONSE:
            return MessageKind.WRITE_COIL_RESPONSE
        raise ClassifyError("write-coil request and echo are identical; direction needed")
    return MessageKind.OTHER


@dataclass(frozen=True)
class FrameInfo:
    """Flat metadata view of a frame, for rule matching and capture records."""

    kind: MessageKind
    function: int
    start_address: Optional[int] = None
    word_count: Optional[int] = None
    address: Optional[int] = None
    value: Optional[int] = None
    values: Optional[Tuple[int, ...]] = None
    exception_code: Optional[int] = None


def describe(frame: ModbusFrame, direction: Direction) -> FrameInfo:
    kind = classify(frame, direction)
    if kind is MessageKind.READ_REQUEST:
        r = parse_read_request(frame)
        return FrameInfo(kind, frame.function, start_address=r.start_address,
                         word_count=r.word_count)
    if kind is MessageKind.READ_RESPONSE:
        r = parse_read_response(frame)
        return FrameInfo(kind, frame.function, word_count=r.byte_count // 2, values=r.values)
    if kind in (MessageKind.WRITE_COIL_REQUEST, MessageKind.WRITE_COIL_RESPONSE):
        w = parse_write_coil(frame)
        return FrameInfo(kind, frame.function, address=w.coil_address, value=w.value)
    if kind is MessageKind.EXCEPTION:
        return FrameInfo(kind, frame.function, exception_code=parse_exception(frame))
    if frame.function == WRITE_SINGLE_REGISTER and len(frame.payload) == 4:
        w = parse_write_register(frame)
        return FrameInfo(kind, frame.function, address=w.address, value=w.value)
    return FrameInfo(kind, frame.function)
