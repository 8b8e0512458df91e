"""Scenario clock: virtual seconds running at a configurable multiple of
wall time, so timelines stated in scenario seconds replay quickly.

All periods, timeouts, and timestamps across the testbed are in scenario
seconds; only this module converts to real sleep durations.
"""

from __future__ import annotations

import asyncio
import time


class ScenarioClock:
    def __init__(self, scale: float = 1.0):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale
        self._t0 = time.perf_counter()

    def now(self) -> float:
        return (time.perf_counter() - self._t0) * self.scale

    def to_real(self, scenario_seconds: float) -> float:
        return scenario_seconds / self.scale

    async def sleep(self, scenario_seconds: float) -> None:
        if scenario_seconds > 0:
            await asyncio.sleep(self.to_real(scenario_seconds))

    async def sleep_until(self, scenario_time: float) -> None:
        await self.sleep(scenario_time - self.now())

    async def wait_for(self, awaitable, scenario_timeout: float):
        return await asyncio.wait_for(awaitable, self.to_real(scenario_timeout))
