"""Radial distribution feeder model.

One substation bus feeds two radial lines through breaker/sectionalizer
switches; two tie switches (normally open) can bridge the line ends for
backfeed reconfiguration. The electrical model is deliberately coarse:
energized buses sit at nominal voltage, a switch carries the summed load
current of everything downstream of it, and configurations that would close
a loop are rejected outright.

Loads and voltages are held as integers in hundredths (centiamps,
centi-kilovolts) so register values scale by 100 with no float rounding.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, List, Optional, Tuple

NOMINAL_CENTIKV = 2318  # 23.18 kV

LINE = "line"
TIE = "tie"

# Load-side bus of switch RTU_0k is Bk; substation is SUB. Loads in amps.
DEFAULT_TOPOLOGY = {
    "source": "SUB",
    "nominal_kv": 23.18,
    "buses": {
        "B1": 30.00,
        "B2": 40.00,
        "B3": 32.52,
        "B4": 4.50,
        "B5": 3.89,
        "B6": 3.00,
        "B9": 50.00,
        "B10": 70.00,
        "B11": 60.76,
    },
    "switches": [
        {"name": "RTU_01", "from": "SUB", "to": "B1", "kind": LINE, "normally_closed": True},
        {"name": "RTU_02", "from": "B1", "to": "B2", "kind": LINE, "normally_closed": True},
        {"name": "RTU_03", "from": "B2", "to": "B3", "kind": LINE, "normally_closed": True},
        {"name": "RTU_04", "from": "B3", "to": "B4", "kind": LINE, "normally_closed": True},
        {"name": "RTU_05", "from": "B4", "to": "B5", "kind": LINE, "normally_closed": True},
        {"name": "RTU_06", "from": "B5", "to": "B6", "kind": LINE, "normally_closed": True},
        {"name": "RTU_11", "from": "SUB", "to": "B11", "kind": LINE, "normally_closed": True},
        {"name": "RTU_10", "from": "B11", "to": "B10", "kind": LINE, "normally_closed": True},
        {"name": "RTU_09", "from": "B10", "to": "B9", "kind": LINE, "normally_closed": True},
        {"name": "RTU_07", "from": "B6", "to": "B9", "kind": TIE, "normally_closed": False},
        {"name": "RTU_08", "from": "B3", "to": "B10", "kind": TIE, "normally_closed": False},
    ],
}


class LoopError(Exception):
    """Requested switch configuration would close a loop."""


@dataclass(frozen=True)
class SwitchDef:
    name: str
    bus_a: str
    bus_b: str
    kind: str
    normally_closed: bool

    @property
    def measure_bus(self) -> Optional[str]:
        # Line switches meter at their load-side bus; ties meter whichever
        # end happens to be live (handled in the solver).
        return self.bus_b if self.kind == LINE else None


@dataclass(frozen=True)
class GridState:
    closed: Dict[str, bool]
    currents_centi: Dict[str, int]
    voltages_centi: Dict[str, int]
    energized: FrozenSet[str]

    def current_amps(self, name: str) -> float:
        return self.currents_centi[name] / 100

    def voltage_kv(self, name: str) -> float:
        return self.voltages_centi[name] / 100

    def as_dict(self) -> dict:
        return {
            "closed": dict(self.closed),
            "currents": {k: v / 100 for k, v in self.currents_centi.items()},
            "voltages": {k: v / 100 for k, v in self.voltages_centi.items()},
            "currents_centi": dict(self.currents_centi),
            "voltages_centi": dict(self.voltages_centi),
            "energized": sorted(self.energized),
        }


class GridModel:
    """Static topology plus the pure solver."""

    def __init__(self, source: str, buses: Dict[str, int], switches: List[SwitchDef],
                 nominal_centikv: int = NOMINAL_CENTIKV):
        self.source = source
        self.buses = dict(buses)  # bus -> load in centiamps
        self.switches = {s.name: s for s in switches}
        self.nominal_centikv = nominal_centikv
        names = set(self.buses) | {source}
        for s in switches:
            for b in (s.bus_a, s.bus_b):
                if b not in names:
                    raise ValueError(f"switch {s.name} references unknown bus {b}")

    @classmethod
    def from_dict(cls, cfg: dict) -> "GridModel":
        buses = {name: round(load * 100) for name, load in cfg["buses"].items()}
        switches = [
            SwitchDef(
                name=s["name"],
                bus_a=s["from"],
                bus_b=s["to"],
                kind=s.get("kind", LINE),
                normally_closed=bool(s.get("normally_closed", True)),
            )
            for s in cfg["switches"]
        ]
        return cls(
            source=cfg.get("source", "SUB"),
            buses=buses,
            switches=switches,
            nominal_centikv=round(cfg.get("nominal_kv", 23.18) * 100),
        )

    @classmethod
    def default(cls) -> "GridModel":
        return cls.from_dict(copy.deepcopy(DEFAULT_TOPOLOGY))

    def normal_closed(self) -> Dict[str, bool]:
        return {name: s.normally_closed for name, s in self.switches.items()}

    def solve(self, closed: Dict[str, bool]) -> GridState:
        """Compute steady state for a switch configuration.

        Raises LoopError if the closed switches contain a cycle anywhere,
        energized island or not.
        """
        parent: Dict[str, str] = {}

        def find(x: str) -> str:
            root = x
            while parent.get(root, root) != root:
                root = parent[root]
            while parent.get(x, x) != x:
                parent[x], x = root, parent[x]
            return root

        closed_switches = [self.switches[n] for n, c in closed.items() if c]
        for sw in closed_switches:
            ra, rb = find(sw.bus_a), find(sw.bus_b)
            if ra == rb:
                raise LoopError(f"closing {sw.name} creates a loop")
            parent[ra] = rb

        # breadth-first sweep from the source over closed switches
        adjacency: Dict[str, List[Tuple[str, SwitchDef]]] = {}
        for sw in closed_switches:
            adjacency.setdefault(sw.bus_a, []).append((sw.bus_b, sw))
            adjacency.setdefault(sw.bus_b, []).append((sw.bus_a, sw))
        order: List[str] = [self.source]
        via: Dict[str, SwitchDef] = {}
        tree_parent: Dict[str, str] = {}
        seen = {self.source}
        i = 0
        while i < len(order):
            bus = order[i]
            i += 1
            for nxt, sw in adjacency.get(bus, []):
                if nxt not in seen:
                    seen.add(nxt)
                    via[nxt] = sw
                    tree_parent[nxt] = bus
                    order.append(nxt)
        energized = frozenset(seen)

        # subtree load accumulation in reverse visit order
        subtree: Dict[str, int] = {b: self.buses.get(b, 0) for b in order}
        for bus in reversed(order[1:]):
            subtree[tree_parent[bus]] += subtree[bus]

        currents = {name: 0 for name in self.switches}
        for bus, sw in via.items():
            currents[sw.name] = subtree[bus]

        voltages = {}
        for name, sw in self.switches.items():
            if sw.kind == LINE:
                live = sw.measure_bus in energized
            else:
                live = sw.bus_a in energized or sw.bus_b in energized
            voltages[name] = self.nominal_centikv if live else 0

        return GridState(
            closed=dict(closed),
            currents_centi=currents,
            voltages_centi=voltages,
            energized=energized,
        )


class Grid:
    """Mutable owner of one model's switch state, publishing snapshots."""

    def __init__(self, model: Optional[GridModel] = None,
                 on_event: Optional[Callable[[dict], None]] = None):
        self.model = model or GridModel.default()
        self._closed = self.model.normal_closed()
        self._state = self.model.solve(self._closed)
        self.on_event = on_event

    @property
    def state(self) -> GridState:
        return self._state

    def set_switch(self, name: str, close: bool) -> GridState:
        """Apply a switch command; on a loop condition the state is unchanged."""
        if name not in self.model.switches:
            raise KeyError(f"unknown switch {name}")
        attempt = dict(self._closed)
        attempt[name] = close
        try:
            new_state = self.model.solve(attempt)
        except LoopError:
            if self.on_event:
                self.on_event({
                    "event": "rejected",
                    "switch": name,
                    "close": close,
                    "reason": "loop-condition",
                    "state": self._state.as_dict(),
                })
            raise
        self._closed = attempt
        self._state = new_state
        if self.on_event:
            self.on_event({
                "event": "switch",
                "switch": name,
                "close": close,
                "state": new_state.as_dict(),
            })
        return new_state
