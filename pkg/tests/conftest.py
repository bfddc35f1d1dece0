from __future__ import annotations

import numpy as np
import pytest

from crowdquake.core import SignalList
from crowdquake.simulator import santiago_background

T0 = 1_420_588_800_000  # 2015-01-07T00:00Z


def make_list(vib_times, active=(), t_frame=None, device="d0"):
    """Small hand-built SignalList; ``active`` holds (t, device) pairs."""
    vib_times = list(vib_times)
    active = list(active)
    kind = [1] * len(vib_times) + [0] * len(active)
    t = vib_times + [a[0] for a in active]
    dev = [device] * len(vib_times) + [a[1] for a in active]
    n = len(t)
    return SignalList(np.array(kind, np.int8), np.array(t, np.int64), np.array(dev, dtype=object),
                      np.zeros(n), np.zeros(n), time_frame=t_frame)


@pytest.fixture(scope="session")
def short_background():
    """Two synthetic Santiago-like days."""
    return santiago_background(seed=11, days=2)


# acceptance criteria report one PASS/FAIL line each, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str = "") -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
