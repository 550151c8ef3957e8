"""Simulated time source shared by the radio channel and the ledger.

All timestamps in the package are nanoseconds of simulated time; nothing
ever reads the wall clock, so runs are reproducible.
"""


class SimClock:
    """Monotonic nanosecond counter advanced explicitly by the simulation."""

    def __init__(self, start_ns: int = 0):
        self.now_ns = int(start_ns)

    def advance(self, dt_ns: float) -> int:
        if dt_ns < 0:
            raise ValueError("clock cannot move backwards")
        self.now_ns += int(round(dt_ns))
        return self.now_ns
