"""Traffic capture records and JSONL writers.

Every frame traversal through the proxy produces one record per tap side:
the hmi segment sees what the HMI sent/received, the plc segment what the
PLC received/sent. Records keep the raw bytes (hex) so byte-identity claims
can be checked afterwards, plus decoded fields for analysis.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

from . import modbus as mb

SEGMENT_HMI = "hmi"
SEGMENT_PLC = "plc"

QUERY = "query"
RESPONSE = "response"


@dataclass(frozen=True)
class TrafficRecord:
    t: float
    segment: str
    channel: str
    direction: str
    raw: str
    tid: int
    unit_id: int
    function: int
    kind: str
    rewritten: bool = False
    start_address: Optional[int] = None
    word_count: Optional[int] = None
    address: Optional[int] = None
    value: Optional[int] = None
    values: Optional[Tuple[int, ...]] = None
    exception_code: Optional[int] = None


def record_from_frame(t: float, segment: str, channel: str, direction: str,
                      frame: mb.ModbusFrame, raw: bytes,
                      rewritten: bool = False) -> TrafficRecord:
    mdir = mb.Direction.QUERY if direction == QUERY else mb.Direction.RESPONSE
    try:
        info = mb.describe(frame, mdir)
        kind = info.kind.value
    except mb.ClassifyError:
        info = None
        kind = "unparsed"
    return TrafficRecord(
        t=round(t, 6),
        segment=segment,
        channel=channel,
        direction=direction,
        raw=raw.hex(),
        tid=frame.tid,
        unit_id=frame.unit_id,
        function=frame.function,
        kind=kind,
        rewritten=rewritten,
        start_address=info.start_address if info else None,
        word_count=info.word_count if info else None,
        address=info.address if info else None,
        value=info.value if info else None,
        values=info.values if info else None,
        exception_code=info.exception_code if info else None,
    )


class CaptureWriter:
    """Buffered JSONL capture; first line is the run metadata."""

    def __init__(self, path: str, meta: Optional[dict] = None):
        self.path = path
        self.meta = dict(meta or {})
        self.records: List[TrafficRecord] = []

    def write(self, record: TrafficRecord) -> None:
        self.records.append(record)

    def close(self) -> None:
        self.records.sort(key=lambda r: r.t)
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": self.meta}) + "\n")
            for record in self.records:
                fh.write(json.dumps(asdict(record)) + "\n")


def read_capture(path: str) -> Tuple[dict, List[TrafficRecord]]:
    records: List[TrafficRecord] = []
    meta: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for i, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if i == 0 and "meta" in obj:
                meta = obj["meta"]
                continue
            if obj.get("values") is not None:
                obj["values"] = tuple(obj["values"])
            records.append(TrafficRecord(**obj))
    return meta, records
