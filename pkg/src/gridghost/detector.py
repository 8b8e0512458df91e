"""Protocol-aware anomaly detection over captured Modbus traffic.

SCADA polling traffic is almost perfectly cyclic, so a channel can be
modeled as a DFA whose states walk one fixed cycle of message symbols. A
symbol is the shape of a message (direction, function code, addressing),
never its data values. The detector learns the cycle per channel from an
attack-free capture, then classifies later captures: a symbol outside the
alphabet is an UnknownSymbol, a known symbol at the wrong cycle position is
OutOfOrder, and everything else is Normal.

Write commands are human-triggered and acyclic; they are declared as a
whitelisted function set in the model rather than learned as cycle states.
Symbols rarer than the rarity threshold during learning are likewise
whitelisted instead of forced into the cycle.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

from .capture import TrafficRecord

NORMAL = "Normal"
UNKNOWN_SYMBOL = "UnknownSymbol"
OUT_OF_ORDER = "OutOfOrder"

DEFAULT_WHITELIST_FUNCTIONS = frozenset({5})
RARITY_THRESHOLD = 0.05
MIN_CYCLES = 3


@dataclass(frozen=True, order=True)
class Symbol:
    """Shape of one message: direction, function, addressing fields.

    Data values never appear here; two reads of the same window carrying
    different register values map to the same symbol.
    """

    direction: str
    function: int
    fields: Tuple[int, ...]

    def __str__(self) -> str:
        parts = [self.direction, f"fn={self.function}"]
        parts.extend(str(f) for f in self.fields)
        return " ".join(parts)

    def as_dict(self) -> dict:
        return {"direction": self.direction, "function": self.function,
                "fields": list(self.fields)}

    @classmethod
    def from_dict(cls, obj: dict) -> "Symbol":
        return cls(obj["direction"], obj["function"], tuple(obj["fields"]))


def symbolize(record: TrafficRecord) -> Symbol:
    """Canonical symbol for a capture record; total and pure."""
    raw_len = len(record.raw) // 2
    if record.kind == "read-request":
        fields = (record.start_address, record.word_count)
    elif record.kind == "read-response":
        fields = (raw_len - 9,)  # byte count of the register payload
    elif record.kind in ("write-coil-request", "write-coil-response"):
        fields = (record.address,)
    elif record.kind == "exception":
        fields = ()
    else:
        fields = (raw_len - 8,)  # fall back to payload length
    return Symbol(record.direction, record.function, fields)


class LearnError(Exception):
    def __init__(self, message: str, position: Optional[int] = None):
        super().__init__(message)
        self.position = position


@dataclass(frozen=True)
class ChannelDfa:
    """Single-cycle DFA plus the acyclic whitelist for one channel."""

    channel: str
    cycle: Tuple[Symbol, ...]
    rare: FrozenSet[Symbol] = frozenset()
    whitelist_functions: FrozenSet[int] = DEFAULT_WHITELIST_FUNCTIONS

    @property
    def alphabet(self) -> FrozenSet[Symbol]:
        return frozenset(self.cycle)

    def whitelisted(self, symbol: Symbol) -> bool:
        return symbol.function in self.whitelist_functions or symbol in self.rare

    def as_dict(self) -> dict:
        return {
            "channel": self.channel,
            "cycle": [s.as_dict() for s in self.cycle],
            "rare": [s.as_dict() for s in sorted(self.rare)],
            "whitelist_functions": sorted(self.whitelist_functions),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ChannelDfa":
        return cls(
            channel=obj["channel"],
            cycle=tuple(Symbol.from_dict(s) for s in obj["cycle"]),
            rare=frozenset(Symbol.from_dict(s) for s in obj.get("rare", [])),
            whitelist_functions=frozenset(obj.get("whitelist_functions", [])),
        )


@dataclass(frozen=True)
class Event:
    index: int
    t: float
    channel: str
    kind: str
    symbol: str
    expected: Optional[str] = None

    def as_dict(self) -> dict:
        out = {"index": self.index, "t": self.t, "channel": self.channel,
               "kind": self.kind, "symbol": self.symbol}
        if self.expected is not None:
            out["expected"] = self.expected
        return out


def _canonical_rotation(cycle: Sequence[Symbol]) -> Tuple[Symbol, ...]:
    # captures start at an arbitrary cycle offset; pick a rotation that
    # does not depend on it, so re-learning yields the same DFA
    rotations = [tuple(cycle[i:]) + tuple(cycle[:i]) for i in range(len(cycle))]
    return min(rotations)


def learn(records: Sequence[TrafficRecord], channel: str, *,
          whitelist_functions: FrozenSet[int] = DEFAULT_WHITELIST_FUNCTIONS,
          rarity: float = RARITY_THRESHOLD,
          min_cycles: int = MIN_CYCLES) -> ChannelDfa:
    """Extract the repeating symbol cycle from attack-free traffic.

    Whitelisted functions are dropped before periodicity analysis; symbols
    seen in fewer than `rarity` of the cycles are whitelisted too. Raises
    LearnError when no stable cycle exists, naming the first position that
    breaks periodicity.
    """
    symbols = [symbolize(r) for r in records]
    stream = [s for s in symbols if s.function not in whitelist_functions]
    if not stream:
        raise LearnError("no symbols to learn from", position=0)

    counts = Counter(stream)
    cycle_estimate = max(counts.values())
    rare = frozenset(s for s, n in counts.items() if n < rarity * cycle_estimate)
    filtered = [s for s in stream if s not in rare]

    n = len(filtered)
    best_first_break = -1
    for period in range(1, n // min_cycles + 1):
        first_break = next(
            (i for i in range(n - period) if filtered[i] != filtered[i + period]),
            None)
        if first_break is None:
            cycle = _canonical_rotation(filtered[:period])
            return ChannelDfa(channel=channel, cycle=cycle, rare=rare,
                              whitelist_functions=frozenset(whitelist_functions))
        best_first_break = max(best_first_break, first_break + period)
    raise LearnError(
        f"{channel}: no stable cycle over {n} symbols "
        f"(first aperiodic position {best_first_break})",
        position=best_first_break)


def classify(records: Sequence[TrafficRecord], dfa: ChannelDfa) -> List[Event]:
    """Walk the capture through the DFA; classification is total.

    After an anomaly the tracker resynchronizes at the next occurrence of
    the cycle head. Known symbols seen while unsynced count as Normal.
    """
    cycle = dfa.cycle
    alphabet = dfa.alphabet
    head = cycle[0]
    pos: Optional[int] = None
    events: List[Event] = []
    for i, record in enumerate(records):
        s = symbolize(record)
        if dfa.whitelisted(s):
            events.append(Event(i, record.t, record.channel, NORMAL, str(s)))
            continue
        if s not in alphabet:
            expected = str(cycle[pos]) if pos is not None else None
            events.append(Event(i, record.t, record.channel, UNKNOWN_SYMBOL,
                                str(s), expected))
            pos = None
            continue
        if pos is None:
            if s == head:
                pos = 1 % len(cycle)
            events.append(Event(i, record.t, record.channel, NORMAL, str(s)))
            continue
        if s == cycle[pos]:
            events.append(Event(i, record.t, record.channel, NORMAL, str(s)))
            pos = (pos + 1) % len(cycle)
        else:
            events.append(Event(i, record.t, record.channel, OUT_OF_ORDER,
                                str(s), str(cycle[pos])))
            pos = 1 % len(cycle) if s == head else None
    return events


# --- capture-level conveniences -------------------------------------------

def group_by_channel(records: Sequence[TrafficRecord]) -> Dict[str, List[TrafficRecord]]:
    out: Dict[str, List[TrafficRecord]] = {}
    for r in records:
        out.setdefault(r.channel, []).append(r)
    return out


def learn_capture(records: Sequence[TrafficRecord], *,
                  whitelist_functions: FrozenSet[int] = DEFAULT_WHITELIST_FUNCTIONS,
                  rarity: float = RARITY_THRESHOLD) -> Dict[str, ChannelDfa]:
    """One DFA per channel found in the capture."""
    return {
        channel: learn(rows, channel, whitelist_functions=whitelist_functions,
                       rarity=rarity)
        for channel, rows in group_by_channel(records).items()
    }


def classify_capture(records: Sequence[TrafficRecord],
                     model: Dict[str, ChannelDfa]) -> Dict[str, List[Event]]:
    grouped = group_by_channel(records)
    missing = sorted(set(grouped) - set(model))
    if missing:
        raise KeyError(f"no learned model for channels: {', '.join(missing)}")
    return {channel: classify(rows, model[channel])
            for channel, rows in grouped.items()}


def anomaly_report(events_by_channel: Dict[str, List[Event]],
                   segment: str, *, anomaly_limit: int = 100) -> dict:
    """Per-channel counts plus the first anomalies, JSON-shaped."""
    channels = {}
    total = Counter()
    for channel in sorted(events_by_channel):
        events = events_by_channel[channel]
        counts = Counter(e.kind for e in events)
        total.update(counts)
        anomalies = [e.as_dict() for e in events if e.kind != NORMAL]
        channels[channel] = {
            "records": len(events),
            "counts": {k: counts.get(k, 0)
                       for k in (NORMAL, UNKNOWN_SYMBOL, OUT_OF_ORDER)},
            "anomalies": anomalies[:anomaly_limit],
        }
    return {
        "segment": segment,
        "counts": {k: total.get(k, 0)
                   for k in (NORMAL, UNKNOWN_SYMBOL, OUT_OF_ORDER)},
        "channels": channels,
    }


def save_model(model: Dict[str, ChannelDfa], path: str) -> None:
    payload = {"channels": {c: dfa.as_dict() for c, dfa in sorted(model.items())}}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_model(path: str) -> Dict[str, ChannelDfa]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return {c: ChannelDfa.from_dict(obj)
            for c, obj in payload["channels"].items()}
