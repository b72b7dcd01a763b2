"""Time sources for the engine.

The engine never calls time.* directly; it asks its clock. Wall mode wraps
perf_counter for real benchmarks. Virtual mode advances only when the engine
reports computed tokens (one unit per token), so every latency number in a
virtual run is an exact integer function of the schedule. CI asserts on those.
"""

import time


class WallClock:
    """Real time. advance() is a no-op because wall time passes on its own."""

    def now(self) -> float:
        return time.perf_counter()

    def advance(self, units: float) -> None:
        pass

    def jump_to(self, t: float) -> None:
        # cannot fast-forward real time; sleep until t instead
        while True:
            dt = t - time.perf_counter()
            if dt <= 0:
                return
            time.sleep(min(dt, 0.002))


class VirtualClock:
    """Deterministic clock: now() = total tokens computed plus explicit jumps."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)

    def now(self) -> float:
        return self._t

    def advance(self, units: float) -> None:
        if units < 0:
            raise ValueError("time only moves forward")
        self._t += units

    def jump_to(self, t: float) -> None:
        # used by async drivers to skip idle gaps between arrivals
        if t > self._t:
            self._t = float(t)
