import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from cdrscope.core import (Calendar, DatasetError, ObservationWindow, StratificationWarning, WindowTag,
                           load_dataset_dir, parse_dataset, split_train_test, write_dataset)

from conftest import DAY, T0, make_dataset


def _write(tmp_path, events, users=None, towers=None):
    users = users or [("u1", 30, "F", "d1", 0), ("u2", 41, "M", "d2", 1), ("u3", 25, "F", "d1", 0)]
    towers = towers or [("t1", 0.0, 0.0), ("t2", 1.5, 2.0)]
    pd.DataFrame(events, columns=["timestamp", "caller_id", "callee_id", "kind", "duration_s", "tower_id"]).to_csv(
        tmp_path / "events.csv", index=False)
    pd.DataFrame(users, columns=["user_id", "age", "gender", "district_id", "default"]).to_csv(
        tmp_path / "users.csv", index=False)
    pd.DataFrame(towers, columns=["tower_id", "x_km", "y_km"]).to_csv(tmp_path / "towers.csv", index=False)
    return tmp_path / "events.csv", tmp_path / "users.csv", tmp_path / "towers.csv"


def _stamp(sec):
    return pd.Timestamp(T0 + sec, unit="s").strftime("%Y-%m-%dT%H:%M:%SZ")


def test_parse_three_clean_rows(tmp_path):
    paths = _write(tmp_path, [
        (_stamp(10), "u1", "u2", "CALL", 30, "t1"),
        (_stamp(20), "u2", "u1", "SMS", 0, "t2"),
        (_stamp(30), "u3", "u1", "CALL", 0, "t1"),
    ])
    ds = parse_dataset(*paths)
    assert len(ds.events) == 3
    assert ds.n_rejected == 0
    assert list(ds.events["kind"]) == ["CALL", "MESSAGE", "CALL"]
    assert list(ds.events["zero_call"]) == [False, False, True]


def test_self_loop_rejected_and_counted(tmp_path):
    good = [(_stamp(60 * i), "u1", "u2", "SMS", 0, "t1") for i in range(120)]
    paths = _write(tmp_path, good + [(_stamp(5), "u3", "u3", "CALL", 10, "t1")])
    ds = parse_dataset(*paths)
    assert ds.n_rejected == 1
    assert ds.reject_reasons == {"self_loop": 1}
    assert len(ds.events) == 120


def test_unknown_user_kept_as_external(tmp_path):
    paths = _write(tmp_path, [
        (_stamp(1), "u1", "u2", "CALL", 12, "t1"),
        (_stamp(2), "u1", "x9", "SMS", 0, "t1"),
        (_stamp(3), "x9", "u3", "CALL", 40, ""),
        (_stamp(4), "u2", "u3", "SMS", 0, "t2"),
        (_stamp(5), "x7", "x9", "SMS", 0, ""),
    ])
    ds = parse_dataset(*paths)
    assert ds.n_rejected == 0
    assert list(ds.events["external"]) == [False, True, True, False, True]
    assert "x9" not in ds.users


def test_too_many_bad_rows_abort(tmp_path):
    rows = [(_stamp(i), "u1", "u2", "CALL", 3, "t1") for i in range(50)]
    rows += [("not-a-time", "u1", "u2", "CALL", 3, "t1")]
    with pytest.raises(DatasetError, match="exceed 1%"):
        parse_dataset(*_write(tmp_path, rows))


def test_missing_file_and_bad_header(tmp_path):
    ev, us, tw = _write(tmp_path, [(_stamp(1), "u1", "u2", "CALL", 3, "t1")])
    with pytest.raises(FileNotFoundError):
        parse_dataset(tmp_path / "nope.csv", us, tw)
    pd.DataFrame({"a": [1]}).to_csv(tw, index=False)
    with pytest.raises(DatasetError, match="header"):
        parse_dataset(ev, us, tw)


def test_events_sorted_with_deterministic_ties():
    ds = make_dataset([(5, "u2", "u1", "CALL", 1, "t1"), (5, "u1", "u3", "CALL", 1, "t1"),
                       (5, "u1", "u2", "CALL", 1, "t1"), (1, "u3", "u1", "CALL", 1, "t1")])
    got = list(zip(ds.events["ts"] - T0, ds.events["caller"], ds.events["callee"]))
    assert got == [(1, "u3", "u1"), (5, "u1", "u2"), (5, "u1", "u3"), (5, "u2", "u1")]


def test_round_trip_is_identity(small_dataset, tmp_path):
    write_dataset(small_dataset, tmp_path)
    back = load_dataset_dir(tmp_path)
    assert back.n_rejected == 0
    cols = ["ts", "caller", "callee", "kind", "duration", "tower", "external", "zero_call"]
    pd.testing.assert_frame_equal(back.events[cols], small_dataset.events[cols])
    assert back.users == small_dataset.users
    assert back.towers == small_dataset.towers
    assert back.window == small_dataset.window


def test_window_config_from_json(tmp_path):
    w = ObservationWindow(T0, T0 + 7 * DAY, 2.0, 9, 17)
    assert ObservationWindow.from_json(json.loads(json.dumps(w.to_json()))) == w
    with pytest.raises(DatasetError):
        ObservationWindow.from_json({**w.to_json(), "extra": 1})


# -- splitting ---------------------------------------------------------------

def test_split_ten_users_one_defaulter():
    labels = {f"u{i:02d}": int(i == 3) for i in range(10)}
    with pytest.warns(StratificationWarning):
        train, test = split_train_test(labels, 0.7, seed=1)
    assert (len(train), len(test)) == (7, 3)
    assert ("u03" in train) != ("u03" in test)
    with pytest.warns(StratificationWarning):
        assert split_train_test(labels, 0.7, seed=1) == (train, test)


def test_split_thousand_users_ten_defaulters():
    labels = {f"u{i:04d}": int(i % 100 == 0) for i in range(1000)}
    train, test = split_train_test(labels, 0.7, seed=5)
    assert sum(labels[u] for u in train) == 7
    assert len(train) == 700


@settings(max_examples=60, deadline=None)
@given(n=st.integers(4, 300), rate=st.floats(0.01, 0.6), frac=st.floats(0.1, 0.9), seed=st.integers(0, 10**6))
def test_split_properties(n, rate, frac, seed):
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < rate).astype(int)
    y[0], y[1] = 1, 0
    y[2], y[3] = 1, 0
    labels = {f"u{i:04d}": int(v) for i, v in enumerate(y)}
    train, test = split_train_test(labels, frac, seed)
    assert set(train).isdisjoint(test)
    assert set(train) | set(test) == set(labels)
    for c in (0, 1):
        size = int((y == c).sum())
        in_train = sum(labels[u] == c for u in train)
        assert abs(in_train - frac * size) <= 1 + 1e-9


def test_split_rejects_bad_fraction():
    with pytest.raises(ValueError):
        split_train_test({"a": 0, "b": 1}, 1.0)


# -- calendar ----------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(days=st.integers(1, 70), offset=st.sampled_from([-5.0, 0.0, 3.0, 5.5]),
       shift=st.integers(0, 6 * DAY))
def test_calendar_windows_tile(days, offset, shift):
    w = ObservationWindow(T0 + shift, T0 + shift + days * DAY, offset)
    cal = Calendar(w)
    ts = np.linspace(w.start, w.end - 1, 200).astype(np.int64)
    for tag in (WindowTag.DAY, WindowTag.WEEK, WindowTag.MONTH):
        wins = cal.windows(tag)
        idx = cal.assign(tag, ts)
        assert idx.min() >= 0 and idx.max() < len(wins)
        for i, t in zip(idx, ts):
            assert wins[i].start <= t < wins[i].end
        bounds = [(x.start, x.end) for x in wins]
        assert bounds[0][0] == w.start and bounds[-1][1] == w.end
        assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))


def test_business_hours_and_weekend():
    cal = Calendar(ObservationWindow(T0, T0 + 7 * DAY))
    # Monday 09:00, Monday 19:00, Saturday 10:00
    ts = np.array([T0 + 9 * 3600, T0 + 19 * 3600, T0 + 5 * DAY + 10 * 3600])
    assert cal.assign(WindowTag.BUSINESS_HOURS, ts).tolist() == [0, -1, -1]
    assert cal.assign(WindowTag.NON_BUSINESS, ts).tolist() == [-1, 0, 0]
    assert cal.assign(WindowTag.WEEKEND, ts).tolist() == [-1, -1, 0]
    assert cal.dow(ts).tolist() == [0, 0, 5]
