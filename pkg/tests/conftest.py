import datetime as dt

import numpy as np
import pandas as pd
import pytest

from cdrscope.core import ObservationWindow, TowerRecord, UserRecord, build_dataset
from cdrscope.synth import GenConfig, generate

# Monday 2016-11-07 00:00 UTC
T0 = int(dt.datetime(2016, 11, 7, tzinfo=dt.timezone.utc).timestamp())
DAY = 86400

_ACCEPTANCE = {}


def record_criterion(number: int, ok: bool, detail: str):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])


def make_dataset(events, users=None, towers=None, days=7, start=T0, labels=None):
    """Dataset from ``(t_offset, caller, callee, kind, duration, tower)`` tuples.

    ``users`` defaults to every endpoint whose id starts with ``u``.
    """
    rows = [dict(ts=start + t, caller=a, callee=b, kind=k, duration=d, tower=tw) for t, a, b, k, d, tw in events]
    ev = pd.DataFrame(rows, columns=["ts", "caller", "callee", "kind", "duration", "tower"])
    if users is None:
        users = sorted({x for e in events for x in e[1:3] if x.startswith("u")})
    labels = labels or {}
    users = {u: UserRecord(u, 30, "F", "d1", bool(labels.get(u, 0))) for u in users}
    towers = towers or {"t1": (0.0, 0.0), "t2": (3.0, 4.0), "t3": (0.0, 2.0)}
    towers = {t: TowerRecord(t, float(x), float(y)) for t, (x, y) in towers.items()}
    return build_dataset(ev, users, towers, ObservationWindow(start, start + days * DAY))


@pytest.fixture(scope="session")
def small_dataset():
    return generate(GenConfig(n_users=300, n_towers=30, default_rate=0.05, seed=3, mean_community_size=12.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
