"""Scenario files: what to run, for how long, and what the attacker does.

A scenario bundles the testbed configuration for one experiment: run
duration and time scale, the attack script and its active windows, and the
operator actions to replay against the console API. Times are always in
scenario seconds; the time scale only decides how fast the wall clock
advances through them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Tuple

import yaml

OPEN = "open"
CLOSE = "close"

DEFAULT_TIME_SCALE = 10.0
DEFAULT_POLL_PERIOD = 0.5
DEFAULT_RESPONSE_TIMEOUT = 1.0


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class OperatorStep:
    time: float
    rtu: str
    action: str


@dataclass(frozen=True)
class Scenario:
    name: str
    duration: float
    time_scale: float = DEFAULT_TIME_SCALE
    iaml_path: Optional[str] = None
    half_duplex: bool = False
    windows: Optional[Tuple[Tuple[float, float], ...]] = None
    operator: Tuple[OperatorStep, ...] = ()
    poll_period: float = DEFAULT_POLL_PERIOD
    response_timeout: float = DEFAULT_RESPONSE_TIMEOUT
    topology: Optional[dict] = None
    plc_base_port: int = 0
    listen_base_port: int = 0
    api_port: Optional[int] = None

    def validate(self) -> None:
        if self.duration <= 0:
            raise ScenarioError("duration must be positive")
        if self.time_scale <= 0:
            raise ScenarioError("time_scale must be positive")
        if self.poll_period <= 0 or self.response_timeout <= 0:
            raise ScenarioError("poll_period and response_timeout must be positive")
        for step in self.operator:
            if step.action not in (OPEN, CLOSE):
                raise ScenarioError(
                    f"operator action must be open or close, got {step.action!r}")
            if not 0 <= step.time <= self.duration:
                raise ScenarioError(
                    f"operator step at t={step.time} lies outside the run "
                    f"duration {self.duration}")
        if self.windows is not None:
            for start, end in self.windows:
                if end < start:
                    raise ScenarioError(f"window [{start}, {end}] ends before it starts")
        if self.iaml_path is not None and not os.path.exists(self.iaml_path):
            raise ScenarioError(f"attack script not found: {self.iaml_path}")

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "duration": self.duration,
            "time_scale": self.time_scale,
            "iaml": self.iaml_path,
            "half_duplex": self.half_duplex,
            "windows": [list(w) for w in self.windows] if self.windows else None,
            "operator": [{"time": s.time, "rtu": s.rtu, "action": s.action}
                         for s in self.operator],
            "poll_period": self.poll_period,
            "response_timeout": self.response_timeout,
        }


def load_scenario(path: str, *, time_scale: Optional[float] = None) -> Scenario:
    """Parse a scenario YAML; relative paths resolve against the file."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: expected a mapping at top level")
    base = os.path.dirname(os.path.abspath(path))

    known = {"name", "duration", "time_scale", "iaml", "half_duplex", "windows",
             "operator", "poll_period", "response_timeout", "topology",
             "plc_base_port", "listen_base_port", "api_port"}
    unknown = set(doc) - known
    if unknown:
        raise ScenarioError(f"{path}: unknown keys {sorted(unknown)}")
    if "duration" not in doc:
        raise ScenarioError(f"{path}: duration is required")

    iaml_path = doc.get("iaml")
    if iaml_path is not None:
        iaml_path = os.path.join(base, iaml_path)

    windows = doc.get("windows")
    if windows is not None:
        try:
            windows = tuple((float(s), float(e)) for s, e in windows)
        except (TypeError, ValueError) as e:
            raise ScenarioError(f"{path}: windows must be [start, end] pairs") from e

    steps = []
    for i, step in enumerate(doc.get("operator") or []):
        try:
            steps.append(OperatorStep(time=float(step["time"]),
                                      rtu=str(step["rtu"]),
                                      action=str(step["action"])))
        except (KeyError, TypeError, ValueError) as e:
            raise ScenarioError(
                f"{path}: operator[{i}] needs time, rtu, and action") from e

    scenario = Scenario(
        name=str(doc.get("name") or os.path.splitext(os.path.basename(path))[0]),
        duration=float(doc["duration"]),
        time_scale=float(time_scale if time_scale is not None
                         else doc.get("time_scale", DEFAULT_TIME_SCALE)),
        iaml_path=iaml_path,
        half_duplex=bool(doc.get("half_duplex", False)),
        windows=windows,
        operator=tuple(steps),
        poll_period=float(doc.get("poll_period", DEFAULT_POLL_PERIOD)),
        response_timeout=float(doc.get("response_timeout", DEFAULT_RESPONSE_TIMEOUT)),
        topology=doc.get("topology"),
        plc_base_port=int(doc.get("plc_base_port", 0)),
        listen_base_port=int(doc.get("listen_base_port", 0)),
        api_port=doc.get("api_port"),
    )
    scenario.validate()
    return scenario
