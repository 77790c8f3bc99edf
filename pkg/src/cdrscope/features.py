"""Per-user feature extraction, assembly and normalization.

Six groups are produced: NETWORK, CONSUMPTION, CORRESPONDENT, RECIPROCATED,
MOBILITY and LOCATION. Windowed statistics are expanded over the calendar
taxonomy, the event direction (In, Out, InOut) and the event kind (Call,
Message, All). Absent activity is encoded as 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

import numba
import numpy as np
import pandas as pd

from .core import DOW_NAMES, Calendar, Dataset, WindowTag

log = logging.getLogger(__name__)

GROUPS = ["NETWORK", "CONSUMPTION", "CORRESPONDENT", "RECIPROCATED", "MOBILITY", "LOCATION"]
KIND_LABELS = {"CALL": "Call", "MESSAGE": "Message", "ALL": "All"}
DIR_LABELS = {"IN": "In", "OUT": "Out", "IN_OUT": "InOut"}
# (kind, direction) cell selectors; cell index = kind * 2 + direction, kind 0=CALL, direction 0=IN
KIND_SEL = {"CALL": (0,), "MESSAGE": (1,), "ALL": (0, 1)}
DIR_SEL = {"IN": (0,), "OUT": (1,), "IN_OUT": (0, 1)}
TOD_BUCKETS = ["Night", "Morning", "Day", "Evening"]       # 0-6, 6-12, 12-18, 18-24 local
AGGREGATE_TAGS = (WindowTag.BUSINESS_HOURS, WindowTag.NON_BUSINESS, WindowTag.WEEKEND,
                  WindowTag.WEEKDAY, WindowTag.TOTAL)
# mean tower default rate measured on real operator data (comparison only)
REFERENCE_MEAN_TOWER_PD = 0.0032


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    group: str
    stat: str
    window: str = "NONE"          # window taxonomy tag, or NONE for unwindowed statistics
    window_label: str = ""
    direction: str | None = None
    kind: str | None = None


@dataclass
class FeatureConfig:
    tags: tuple = tuple(WindowTag)
    response_window: int = 3600
    hour_of_week: bool = False          # full 168-cell reciprocated expansion
    regular_messages_per_week: float = 5.0
    regular_calls_per_week: float = 2.0
    popular_coverage: float = 0.9
    location_one_hot: bool = False


@dataclass
class Columns:
    """A block of raw feature columns for a fixed user ordering."""

    user_ids: list
    specs: list
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(len(self.user_ids), len(self.specs))

    @property
    def names(self):
        return [s.name for s in self.specs]

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.values, index=pd.Index(self.user_ids, name="user_id"), columns=self.names)

    def column(self, name) -> np.ndarray:
        return self.values[:, self.names.index(name)]


def concat_columns(blocks) -> Columns:
    blocks = list(blocks)
    ids = blocks[0].user_ids
    for b in blocks[1:]:
        if list(b.user_ids) != list(ids):
            raise ValueError("column blocks disagree on user order")
    specs = [s for b in blocks for s in b.specs]
    return Columns(ids, specs, np.hstack([b.values for b in blocks]) if specs else np.zeros((len(ids), 0)))


# ---------------------------------------------------------------------------
# participation table

@dataclass
class _Rows:
    """One row per (labelled user, event) participation."""

    user: np.ndarray      # row index into user_ids
    other: np.ndarray     # node code of the other party
    ts: np.ndarray
    kind: np.ndarray      # 0 call, 1 message
    dir: np.ndarray       # 0 in, 1 out
    duration: np.ndarray
    tower: np.ndarray     # tower code of the event, -1 when unknown
    n_users: int
    n_nodes: int


def _participations(dataset: Dataset, user_ids=None) -> _Rows:
    ev = dataset.events
    user_ids = dataset.user_ids if user_ids is None else list(user_ids)
    uindex = pd.Index(user_ids)
    nodes = pd.Index(sorted(set(ev["caller"]) | set(ev["callee"]) | set(user_ids)))
    caller_u = uindex.get_indexer(ev["caller"])
    callee_u = uindex.get_indexer(ev["callee"])
    caller_n = nodes.get_indexer(ev["caller"])
    callee_n = nodes.get_indexer(ev["callee"])
    kind = (ev["kind"].to_numpy() == "MESSAGE").astype(np.int64)
    towers = pd.Index(sorted(dataset.towers))
    tower = towers.get_indexer(ev["tower"])
    ts = ev["ts"].to_numpy(np.int64)
    dur = ev["duration"].to_numpy(np.int64)
    out_m = caller_u >= 0
    in_m = callee_u >= 0
    # events are sorted by time; keep that order within the concatenation via a stable sort
    user = np.concatenate([caller_u[out_m], callee_u[in_m]])
    order = np.argsort(np.concatenate([np.flatnonzero(out_m), np.flatnonzero(in_m)]), kind="stable")
    cat = lambda a, b: np.concatenate([a[out_m], b[in_m]])[order]
    return _Rows(
        user=user[order].astype(np.int64),
        other=cat(callee_n, caller_n).astype(np.int64),
        ts=cat(ts, ts),
        kind=cat(kind, kind),
        dir=np.concatenate([np.ones(out_m.sum(), np.int64), np.zeros(in_m.sum(), np.int64)])[order],
        duration=cat(dur, dur),
        tower=cat(tower, np.full(len(ev), -1)).astype(np.int64),
        n_users=len(user_ids),
        n_nodes=len(nodes),
    )


def _combos():
    for kind in ("CALL", "MESSAGE", "ALL"):
        for d in ("IN", "OUT", "IN_OUT"):
            yield kind, d


def _cells(kind, d):
    return [k * 2 + di for k in KIND_SEL[kind] for di in DIR_SEL[d]]


# ---------------------------------------------------------------------------
# consumption

def extract_consumption(dataset: Dataset, config: FeatureConfig | None = None, user_ids=None,
                        _rows: _Rows | None = None) -> Columns:
    """Event counts, call durations and mean inter-event gaps per window, direction and kind."""
    config = config or FeatureConfig()
    rows = _rows or _participations(dataset, user_ids)
    cal = Calendar(dataset.window)
    n = rows.n_users
    specs, cols = [], []
    for tag in config.tags:
        wins = cal.windows(tag)
        nw = len(wins)
        w = cal.assign(tag, rows.ts)
        ok = (w >= 0) & (w < nw)
        cell = rows.kind[ok] * 2 + rows.dir[ok]
        key = (rows.user[ok] * nw + w[ok]) * 4 + cell
        size = n * nw * 4
        cnt = np.bincount(key, minlength=size).reshape(n, nw, 4)
        dur = np.bincount(key, weights=rows.duration[ok].astype(float), minlength=size).reshape(n, nw, 4)
        tmin = np.full(size, np.iinfo(np.int64).max)
        tmax = np.full(size, np.iinfo(np.int64).min)
        np.minimum.at(tmin, key, rows.ts[ok])
        np.maximum.at(tmax, key, rows.ts[ok])
        tmin = tmin.reshape(n, nw, 4)
        tmax = tmax.reshape(n, nw, 4)
        for wi, win in enumerate(wins):
            for kind, d in _combos():
                cs = _cells(kind, d)
                c = cnt[:, wi, cs].sum(axis=1)
                base = f"{win.label}{KIND_LABELS[kind]}{DIR_LABELS[d]}"
                specs.append(FeatureSpec(f"nRecs{base}", "CONSUMPTION", "nRecs", tag.name, win.label, d, kind))
                cols.append(c.astype(float))
                lo = tmin[:, wi, cs].min(axis=1)
                hi = tmax[:, wi, cs].max(axis=1)
                gap = np.where(c > 1, (hi - lo) / np.maximum(c - 1, 1), 0.0)
                specs.append(FeatureSpec(f"gapMean{base}", "CONSUMPTION", "gapMean", tag.name, win.label, d, kind))
                cols.append(gap)
                if kind == "CALL":
                    total = dur[:, wi, cs].sum(axis=1)
                    specs.append(FeatureSpec(f"durTotal{base}", "CONSUMPTION", "durTotal", tag.name, win.label, d, kind))
                    cols.append(total)
                    specs.append(FeatureSpec(f"durMean{base}", "CONSUMPTION", "durMean", tag.name, win.label, d, kind))
                    cols.append(np.where(c > 0, total / np.maximum(c, 1), 0.0))
    ids = dataset.user_ids if user_ids is None else list(user_ids)
    return Columns(ids, specs, np.column_stack(cols) if cols else np.zeros((n, 0)))


# ---------------------------------------------------------------------------
# correspondents

def extract_correspondent(dataset: Dataset, config: FeatureConfig | None = None, user_ids=None,
                          _rows: _Rows | None = None) -> Columns:
    """Unique correspondents per window/direction/kind, regular correspondents, share of incoming messages."""
    config = config or FeatureConfig()
    rows = _rows or _participations(dataset, user_ids)
    cal = Calendar(dataset.window)
    n, m = rows.n_users, rows.n_nodes
    specs, cols = [], []
    for tag in config.tags:
        wins = cal.windows(tag)
        nw = len(wins)
        w = cal.assign(tag, rows.ts)
        ok = (w >= 0) & (w < nw)
        uw = rows.user[ok] * nw + w[ok]
        code3 = uw * m + rows.other[ok]
        code = np.unique(code3 * 4 + rows.kind[ok] * 2 + rows.dir[ok])
        pair, inv = np.unique(code // 4, return_inverse=True)
        mask = np.zeros(len(pair), dtype=np.int64)
        np.bitwise_or.at(mask, inv, 1 << (code % 4))
        owner = pair // m
        for kind, d in _combos():
            bits = sum(1 << c for c in _cells(kind, d))
            counts = np.bincount(owner[(mask & bits) != 0], minlength=n * nw).reshape(n, nw)
            for wi, win in enumerate(wins):
                name = f"uniqCorr{win.label}{KIND_LABELS[kind]}{DIR_LABELS[d]}"
                specs.append(FeatureSpec(name, "CORRESPONDENT", "uniqCorr", tag.name, win.label, d, kind))
                cols.append(counts[:, wi].astype(float))

    # regular correspondents over the whole observation window
    weeks = dataset.window.n_weeks
    code = (rows.user * m + rows.other) * 4 + rows.kind * 2 + rows.dir
    uniq, cnt = np.unique(code, return_counts=True)
    pair_code, pinv = np.unique(uniq // 4, return_inverse=True)
    per = np.zeros((len(pair_code), 4))
    per[pinv, uniq % 4] = cnt
    owner = pair_code // m
    for kind, thresh in (("MESSAGE", config.regular_messages_per_week), ("CALL", config.regular_calls_per_week)):
        for d in ("IN", "OUT", "IN_OUT"):
            rate = per[:, _cells(kind, d)].sum(axis=1) / weeks
            c = np.bincount(owner[rate >= thresh], minlength=n)
            name = f"regCorr{KIND_LABELS[kind]}{DIR_LABELS[d]}"
            specs.append(FeatureSpec(name, "CORRESPONDENT", "regCorr", "TOTAL", "Total", d, kind))
            cols.append(c.astype(float))

    # share of incoming events that are messages, per aggregate window
    inc = rows.dir == 0
    for tag in AGGREGATE_TAGS:
        w = cal.assign(tag, rows.ts)
        sel = inc & (w == 0)
        tot = np.bincount(rows.user[sel], minlength=n)
        msg = np.bincount(rows.user[sel & (rows.kind == 1)], minlength=n)
        label = cal.windows(tag)[0].label
        specs.append(FeatureSpec(f"pctMsgIn{label}", "CORRESPONDENT", "pctMsgIn", tag.name, label, "IN", "MESSAGE"))
        cols.append(np.where(tot > 0, 100.0 * msg / np.maximum(tot, 1), 0.0))
    ids = dataset.user_ids if user_ids is None else list(user_ids)
    return Columns(ids, specs, np.column_stack(cols))


# ---------------------------------------------------------------------------
# reciprocated events

def reciprocation_gaps(dataset: Dataset):
    """For every event, seconds until the receiver next contacts the sender with the same kind.

    Returns an int64 array aligned with ``dataset.events``; -1 where there is
    no later event in the reverse direction.
    """
    ev = dataset.events
    if len(ev) == 0:
        return np.zeros(0, dtype=np.int64)
    nodes = pd.Index(sorted(set(ev["caller"]) | set(ev["callee"])))
    a = nodes.get_indexer(ev["caller"]).astype(np.int64)
    b = nodes.get_indexer(ev["callee"]).astype(np.int64)
    kind = (ev["kind"].to_numpy() == "MESSAGE").astype(np.int64)
    ts = ev["ts"].to_numpy(np.int64)
    t0 = ts.min()
    span = int(ts.max() - t0) + 1
    n = len(nodes)
    fwd = ((a * n + b) * 2 + kind) * span + (ts - t0)
    back = ((b * n + a) * 2 + kind) * span + (ts - t0)
    srt = np.sort(fwd)
    pos = np.searchsorted(srt, back, side="right")
    has = pos < len(srt)
    nxt = srt[np.minimum(pos, len(srt) - 1)]
    same = has & (nxt // span == back // span)
    return np.where(same, nxt % span - (ts - t0), -1)


def extract_reciprocated(dataset: Dataset, response_window: int = 3600, config: FeatureConfig | None = None,
                         user_ids=None) -> Columns:
    """Incoming events answered within ``response_window`` seconds and the median time to answer.

    Answered means the receiving user contacts the sender with an event of the
    same kind strictly later and within the window. Cells are bucketed by the
    local time of the incoming event: day-of-week x time-of-day (or hour of
    week), with day-of-week, time-of-day and total aggregates.
    """
    config = config or FeatureConfig()
    ids = dataset.user_ids if user_ids is None else list(user_ids)
    ev = dataset.events
    uindex = pd.Index(ids)
    recv = uindex.get_indexer(ev["callee"])
    gaps = reciprocation_gaps(dataset)
    sel = (recv >= 0) & (gaps >= 0) & (gaps <= response_window)
    cal = Calendar(dataset.window)
    ts = ev["ts"].to_numpy(np.int64)[sel]
    user = recv[sel]
    gap = gaps[sel].astype(float)
    kind = (ev["kind"].to_numpy()[sel] == "MESSAGE").astype(np.int64)
    dow = cal.dow(ts)
    hour = cal.hour(ts)
    tod = hour // 6
    n = len(ids)

    cell_defs = []     # (window tag, label, cell index array over events)
    if config.hour_of_week:
        labels = [f"HourOfWeek{DOW_NAMES[d]}{h:02d}" for d in range(7) for h in range(24)]
        cell_defs.append(("HOUR_OF_WEEK", labels, dow * 24 + hour))
    else:
        labels = [f"{DOW_NAMES[d]}{TOD_BUCKETS[t]}" for d in range(7) for t in range(4)]
        cell_defs.append(("DOW_TOD", labels, dow * 4 + tod))
    cell_defs.append(("DAY_OF_WEEK", [f"DayOfWeek{d}" for d in DOW_NAMES], dow))
    cell_defs.append(("TIME_OF_DAY", TOD_BUCKETS, tod))
    cell_defs.append(("TOTAL", ["Total"], np.zeros(len(ts), dtype=np.int64)))

    specs, cols = [], []
    for tag, labels, cell in cell_defs:
        nc = len(labels)
        for k, kname in ((0, "CALL"), (1, "MESSAGE")):
            m = kind == k
            key = user[m] * nc + cell[m]
            cnt = np.bincount(key, minlength=n * nc).reshape(n, nc)
            med = np.zeros(n * nc)
            if m.any():
                s = pd.Series(gap[m]).groupby(key).median()
                med[s.index.to_numpy()] = s.to_numpy()
            med = med.reshape(n, nc)
            for ci, lab in enumerate(labels):
                kl = KIND_LABELS[kname]
                specs.append(FeatureSpec(f"recipCount{lab}{kl}", "RECIPROCATED", "recipCount", tag, lab, "IN", kname))
                cols.append(cnt[:, ci].astype(float))
                specs.append(FeatureSpec(f"recipMedianGap{lab}{kl}", "RECIPROCATED", "recipMedianGap", tag, lab,
                                         "IN", kname))
                cols.append(med[:, ci])
    return Columns(ids, specs, np.column_stack(cols))


# ---------------------------------------------------------------------------
# mobility

@numba.njit(cache=True)
def _circle2(ax, ay, bx, by):
    cx = 0.5 * (ax + bx)
    cy = 0.5 * (ay + by)
    return cx, cy, 0.5 * np.hypot(ax - bx, ay - by)


@numba.njit(cache=True)
def _circle3(ax, ay, bx, by, cx, cy):
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-12:
        # collinear: the circle on the farthest pair
        c1 = _circle2(ax, ay, bx, by)
        c2 = _circle2(ax, ay, cx, cy)
        c3 = _circle2(bx, by, cx, cy)
        best = c1
        if c2[2] > best[2]:
            best = c2
        if c3[2] > best[2]:
            best = c3
        return best
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    return ux, uy, np.hypot(ax - ux, ay - uy)


@numba.njit(cache=True)
def _mec(xs, ys):
    n = len(xs)
    if n == 0:
        return 0.0, 0.0, 0.0
    cx, cy, r = xs[0], ys[0], 0.0
    eps = 1e-9
    for i in range(1, n):
        if np.hypot(xs[i] - cx, ys[i] - cy) <= r + eps:
            continue
        cx, cy, r = xs[i], ys[i], 0.0
        for j in range(i):
            if np.hypot(xs[j] - cx, ys[j] - cy) <= r + eps:
                continue
            cx, cy, r = _circle2(xs[i], ys[i], xs[j], ys[j])
            for k in range(j):
                if np.hypot(xs[k] - cx, ys[k] - cy) <= r + eps:
                    continue
                cx, cy, r = _circle3(xs[i], ys[i], xs[j], ys[j], xs[k], ys[k])
    return cx, cy, r


@numba.njit(cache=True)
def _group_mec_radius(xs, ys, ptr):
    out = np.zeros(len(ptr) - 1)
    for g in range(len(ptr) - 1):
        out[g] = _mec(xs[ptr[g]:ptr[g + 1]], ys[ptr[g]:ptr[g + 1]])[2]
    return out


def min_enclosing_circle(points):
    """Smallest circle containing every point, as ``(cx, cy, r)``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    cx, cy, r = _mec(np.ascontiguousarray(pts[:, 0]), np.ascontiguousarray(pts[:, 1]))
    return float(cx), float(cy), float(r)


def popular_tower_count(counts, coverage: float = 0.9) -> int:
    """Size of the smallest tower set covering at least ``coverage`` of the records."""
    c = np.sort(np.asarray(counts, dtype=float))[::-1]
    if c.sum() <= 0:
        return 0
    share = np.cumsum(c) / c.sum()
    return int(np.searchsorted(share, coverage - 1e-12, side="left") + 1)


def _located(dataset: Dataset, rows: _Rows):
    """Outgoing events with a known tower; returns (user, ts, tower code) arrays."""
    sel = (rows.dir == 1) & (rows.tower >= 0)
    return rows.user[sel], rows.ts[sel], rows.tower[sel]


def extract_mobility(dataset: Dataset, config: FeatureConfig | None = None, user_ids=None,
                     _rows: _Rows | None = None) -> Columns:
    """Daily enclosing-circle radius, daily travel distance, popular towers and weekly unique towers.

    A user's location is the serving tower of the events they originate.
    Daily quantities are averaged over the days with located events.
    """
    config = config or FeatureConfig()
    rows = _rows or _participations(dataset, user_ids)
    n = rows.n_users
    cal = Calendar(dataset.window)
    tids = sorted(dataset.towers)
    tx = np.array([dataset.towers[t].x for t in tids], dtype=float)
    ty = np.array([dataset.towers[t].y for t in tids], dtype=float)
    user, ts, tower = _located(dataset, rows)
    nt = len(tids)
    nd = dataset.window.n_days
    day = cal.day_index(ts)
    ok = (day >= 0) & (day < nd)
    user, ts, tower, day = user[ok], ts[ok], tower[ok], day[ok]
    ud = user * nd + day

    # radius: minimum enclosing circle of each user-day's distinct towers
    trip = np.unique(ud * nt + tower)
    g_ud = trip // nt
    g_tw = trip % nt
    starts = np.flatnonzero(np.r_[True, g_ud[1:] != g_ud[:-1]])
    ptr = np.r_[starts, len(trip)].astype(np.int64)
    radius = _group_mec_radius(tx[g_tw], ty[g_tw], ptr) if len(trip) else np.zeros(0)
    active = g_ud[starts]

    # distance: consecutive antennas within the same user-day, in time order
    order = np.lexsort((ts, ud))
    ud_o, tw_o = ud[order], tower[order]
    same = ud_o[1:] == ud_o[:-1]
    step = np.hypot(tx[tw_o[1:]] - tx[tw_o[:-1]], ty[tw_o[1:]] - ty[tw_o[:-1]])
    dist_ud = np.bincount(ud_o[1:][same], weights=step[same], minlength=n * nd)[active]

    a_user = active // nd
    a_dow = np.array([d.weekday() for d in cal.days], dtype=np.int64)[active % nd]
    specs, cols = [], []

    def _mean_by(values, key, size):
        s = np.bincount(key, weights=values, minlength=size)
        c = np.bincount(key, minlength=size)
        return np.where(c > 0, s / np.maximum(c, 1), 0.0)

    for stat, vals in (("radius", radius), ("distance", dist_ud)):
        specs.append(FeatureSpec(f"{stat}DailyMeanTotal", "MOBILITY", f"{stat}DailyMean", "TOTAL", "Total"))
        cols.append(_mean_by(vals, a_user, n))
        per = _mean_by(vals, a_user * 7 + a_dow, n * 7).reshape(n, 7)
        for d in range(7):
            lab = f"DayOfWeek{DOW_NAMES[d]}"
            specs.append(FeatureSpec(f"{stat}DailyMean{lab}", "MOBILITY", f"{stat}DailyMean", "DAY_OF_WEEK", lab))
            cols.append(per[:, d])

    # popular towers
    ut, cnt = np.unique(user * nt + tower, return_counts=True)
    pop = np.zeros(n)
    owner = ut // nt
    bounds = np.flatnonzero(np.r_[True, owner[1:] != owner[:-1], True])
    for s, e in zip(bounds[:-1], bounds[1:]):
        pop[owner[s]] = popular_tower_count(cnt[s:e], config.popular_coverage)
    specs.append(FeatureSpec("popularTowers", "MOBILITY", "popularTowers", "TOTAL", "Total"))
    cols.append(pop)

    # unique towers per calendar week, averaged over every week of the window
    week = cal.assign(WindowTag.WEEK, ts)
    uw = np.unique((user * cal.n_weeks + week) * nt + tower) // nt
    per_week = np.bincount(uw // cal.n_weeks, minlength=n)
    specs.append(FeatureSpec("uniqTowersWeekMean", "MOBILITY", "uniqTowersWeekMean", "WEEK", "Total"))
    cols.append(per_week / cal.n_weeks)
    specs.append(FeatureSpec("uniqTowersTotal", "MOBILITY", "uniqTowers", "TOTAL", "Total"))
    cols.append(np.bincount(owner, minlength=n).astype(float))
    ids = dataset.user_ids if user_ids is None else list(user_ids)
    return Columns(ids, specs, np.column_stack(cols))


# ---------------------------------------------------------------------------
# location

def top_towers(dataset: Dataset, k: int = 2, user_ids=None) -> dict:
    """The ``k`` towers each user originates most events from (ties to the lower tower id)."""
    ids = dataset.user_ids if user_ids is None else list(user_ids)
    ev = dataset.events
    sel = ev["caller"].isin(set(ids)) & (ev["tower"] != "")
    counts = ev.loc[sel].groupby(["caller", "tower"]).size().reset_index(name="n")
    counts = counts.sort_values(["caller", "n", "tower"], ascending=[True, False, True], kind="mergesort")
    top = counts.groupby("caller", sort=False).head(k)
    out = {u: [] for u in ids}
    for u, t in zip(top["caller"], top["tower"]):
        out[u].append(t)
    return out


def tower_default_rates(top: dict, labels: dict, train_ids) -> tuple[dict, float]:
    """Empirical default rate per tower over train users whose top towers include it."""
    train_ids = list(train_ids)
    y = np.array([labels[u] for u in train_ids], dtype=float)
    glob = float(y.mean()) if len(y) else 0.0
    tot, bad = {}, {}
    for u, yu in zip(train_ids, y):
        for t in set(top.get(u, [])):
            tot[t] = tot.get(t, 0) + 1
            bad[t] = bad.get(t, 0) + yu
    return {t: bad[t] / tot[t] for t in sorted(tot)}, glob


def extract_location(dataset: Dataset, train_ids, config: FeatureConfig | None = None, user_ids=None) -> Columns:
    """Train-only default rate of each user's two most used towers (unseen towers get the global rate)."""
    config = config or FeatureConfig()
    ids = dataset.user_ids if user_ids is None else list(user_ids)
    top = top_towers(dataset, 2, ids)
    labels = {u: int(dataset.users[u].default_status) for u in train_ids}
    rates, glob = tower_default_rates(top, labels, train_ids)
    vals = np.full((len(ids), 2), glob)
    for i, u in enumerate(ids):
        for r, t in enumerate(top[u]):
            vals[i, r] = rates.get(t, glob)
    specs = [FeatureSpec(f"towerPd{r + 1}", "LOCATION", "towerPd", "TOTAL", "Total") for r in range(2)]
    blocks = [vals]
    if config.location_one_hot:
        tids = sorted(dataset.towers)
        onehot = np.zeros((len(ids), len(tids)))
        pos = {t: j for j, t in enumerate(tids)}
        for i, u in enumerate(ids):
            for t in top[u]:
                onehot[i, pos[t]] = 1.0
        specs += [FeatureSpec(f"topTower{t}", "LOCATION", "topTower", "TOTAL", "Total") for t in tids]
        blocks.append(onehot)
    return Columns(ids, specs, np.hstack(blocks))


# ---------------------------------------------------------------------------
# network

def extract_network(dataset: Dataset, graph, centrality=None, reciprocity=None, cover=None,
                    user_ids=None) -> Columns:
    """Degree, weighted reciprocity, harmonic centrality and primary community (size rank, size).

    ``centrality`` and ``reciprocity`` are Series indexed by node id; missing
    nodes get 0. The primary community is the surviving community whose label
    has the highest memory frequency for the node; rank 1 is the largest.
    """
    ids = dataset.user_ids if user_ids is None else list(user_ids)
    n = len(ids)
    vals = np.zeros((n, 5))
    deg = pd.Series(graph.out_degree() + graph.in_degree(), index=graph.nodes)
    vals[:, 0] = deg.reindex(ids).fillna(0).to_numpy()
    if reciprocity is not None:
        vals[:, 1] = reciprocity.reindex(ids).fillna(0).to_numpy()
    if centrality is not None:
        vals[:, 2] = centrality.reindex(ids).fillna(0).to_numpy()
    if cover is not None:
        sizes = {lab: len(c) for lab, c in zip(cover.labels, cover.communities)}
        ranked = sorted(sizes, key=lambda lab: (-sizes[lab], lab))
        rank = {lab: i + 1 for i, lab in enumerate(ranked)}
        for i, u in enumerate(ids):
            mem = cover.memberships.get(u, {})
            live = [(f, lab) for lab, f in mem.items() if lab in sizes and u in cover.communities[cover.labels.index(lab)]]
            if live:
                _, lab = max(live, key=lambda t: (t[0], -rank[t[1]]))
                vals[i, 3] = rank[lab]
                vals[i, 4] = sizes[lab]
    names = ["netDegree", "netReciprocity", "netHarmonic", "netCommunityRank", "netCommunitySize"]
    specs = [FeatureSpec(nm, "NETWORK", nm) for nm in names]
    return Columns(ids, specs, vals)


# ---------------------------------------------------------------------------
# assembly

def extract_all(dataset: Dataset, train_ids, graph=None, centrality=None, reciprocity=None, cover=None,
                config: FeatureConfig | None = None, groups=None) -> Columns:
    """Every requested group for all labelled users, as one raw block."""
    config = config or FeatureConfig()
    groups = GROUPS if groups is None else [g.upper() for g in groups]
    unknown = set(groups) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown feature groups: {sorted(unknown)}")
    rows = _participations(dataset)
    blocks = []
    if "NETWORK" in groups:
        if graph is None:
            from .graph import build_weighted
            graph = build_weighted(dataset)
        blocks.append(extract_network(dataset, graph, centrality, reciprocity, cover))
    if "CONSUMPTION" in groups:
        blocks.append(extract_consumption(dataset, config, _rows=rows))
    if "CORRESPONDENT" in groups:
        blocks.append(extract_correspondent(dataset, config, _rows=rows))
    if "RECIPROCATED" in groups:
        blocks.append(extract_reciprocated(dataset, config.response_window, config))
    if "MOBILITY" in groups:
        blocks.append(extract_mobility(dataset, config, _rows=rows))
    if "LOCATION" in groups:
        blocks.append(extract_location(dataset, train_ids, config))
    return concat_columns(blocks)


@dataclass
class FeatureMatrix:
    """Normalized feature matrix with per-column metadata.

    ``X`` holds z-scores using train-row statistics; ``raw`` keeps the
    unnormalized values for re-aggregation.
    """

    X: np.ndarray
    raw: np.ndarray
    specs: list
    user_ids: list
    train_ids: list
    mean: np.ndarray
    std: np.ndarray
    dropped: list = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return [s.name for s in self.specs]

    @property
    def groups(self) -> list[str]:
        return [s.group for s in self.specs]

    @property
    def shape(self):
        return self.X.shape

    def group_counts(self) -> dict:
        out = {g: 0 for g in GROUPS}
        for s in self.specs:
            out[s.group] += 1
        return out

    def rows(self, ids) -> np.ndarray:
        idx = pd.Index(self.user_ids).get_indexer(list(ids))
        if np.any(idx < 0):
            raise KeyError("unknown user id")
        return self.X[idx]

    def column_mask(self, groups=None, exclude=None) -> np.ndarray:
        g = np.array(self.groups)
        m = np.ones(len(g), bool)
        if groups is not None:
            m &= np.isin(g, list(groups))
        if exclude is not None:
            m &= ~np.isin(g, list(exclude))
        return m

    def subset(self, mask) -> "FeatureMatrix":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return FeatureMatrix(self.X[:, idx], self.raw[:, idx], [self.specs[i] for i in idx], self.user_ids,
                             self.train_ids, self.mean[idx], self.std[idx], list(self.dropped))

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.X, index=pd.Index(self.user_ids, name="user_id"), columns=self.columns)

    def schema(self) -> dict:
        return {
            "n_rows": len(self.user_ids),
            "n_columns": len(self.specs),
            "columns": [asdict(s) for s in self.specs],
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "dropped": self.dropped,
            "group_counts": self.group_counts(),
            "train_ids": list(self.train_ids),
        }

    def save(self, out_dir, stem: str = "features"):
        """Write ``<stem>.parquet`` (normalized), ``<stem>_raw.parquet`` and ``<stem>.schema.json``."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        idx = pd.Index(self.user_ids, name="user_id")
        pd.DataFrame(self.X, index=idx, columns=self.columns).to_parquet(out / f"{stem}.parquet")
        pd.DataFrame(self.raw, index=idx, columns=self.columns).to_parquet(out / f"{stem}_raw.parquet")
        with open(out / f"{stem}.schema.json", "w") as fh:
            json.dump(self.schema(), fh, indent=1)
        return out / f"{stem}.parquet"

    @classmethod
    def load(cls, out_dir, stem: str = "features") -> "FeatureMatrix":
        out = Path(out_dir)
        with open(out / f"{stem}.schema.json") as fh:
            schema = json.load(fh)
        X = pd.read_parquet(out / f"{stem}.parquet")
        raw = pd.read_parquet(out / f"{stem}_raw.parquet")
        specs = [FeatureSpec(**c) for c in schema["columns"]]
        return cls(X.to_numpy(np.float64), raw.to_numpy(np.float64), specs, list(X.index), schema["train_ids"],
                   np.array(schema["mean"]), np.array(schema["std"]), schema["dropped"])


def _sort_key(spec: FeatureSpec):
    return GROUPS.index(spec.group), spec.name


def assemble_and_normalize(columns, train_ids) -> FeatureMatrix:
    """Concatenate blocks, order columns by (group, name), z-score with train statistics.

    Columns constant over the train rows are dropped and logged.
    """
    cols = concat_columns(columns) if isinstance(columns, (list, tuple)) else columns
    names = cols.names
    if len(set(names)) != len(names):
        raise ValueError("duplicate feature names")
    order = sorted(range(len(cols.specs)), key=lambda i: _sort_key(cols.specs[i]))
    specs = [cols.specs[i] for i in order]
    raw = cols.values[:, order]
    train_ids = sorted(train_ids)
    tr = pd.Index(cols.user_ids).get_indexer(train_ids)
    if np.any(tr < 0):
        raise KeyError("train ids missing from the feature rows")
    sub = raw[tr]
    const = np.ptp(sub, axis=0) == 0 if len(tr) else np.ones(raw.shape[1], bool)
    dropped = [s.name for s, c in zip(specs, const) if c]
    if dropped:
        log.info("dropping %d constant columns", len(dropped))
    keep = ~const
    specs = [s for s, k in zip(specs, keep) if k]
    raw = np.ascontiguousarray(raw[:, keep])
    sub = raw[tr]
    mean = sub.mean(axis=0)
    centred = sub - mean
    std = np.sqrt((centred ** 2).mean(axis=0))
    X = (raw - mean) / std
    # second pass removes the residual mean left by floating-point rounding
    X -= X[tr].mean(axis=0)
    return FeatureMatrix(X, raw, specs, list(cols.user_ids), train_ids, mean, std, dropped)


def point_biserial(x, y) -> float:
    """Point-biserial correlation (M1 - M0) / s_n * sqrt(n1 n0 / n^2), s_n the population std."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).astype(bool)
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    s = x.std()
    if s == 0:
        return 0.0
    n = len(x)
    n1 = y.sum()
    n0 = n - n1
    return float((x[y].mean() - x[~y].mean()) / s * np.sqrt(n1 * n0 / n ** 2))


def point_biserial_table(fm: FeatureMatrix, labels, ids=None) -> pd.DataFrame:
    """Per-column point-biserial correlation, sorted by |r| descending."""
    ids = fm.user_ids if ids is None else list(ids)
    X = fm.rows(ids)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("both classes must be present")
    s = X.std(axis=0)
    n1 = y.sum()
    n = len(y)
    diff = X[y].mean(axis=0) - X[~y].mean(axis=0)
    r = np.where(s > 0, diff / np.where(s > 0, s, 1) * np.sqrt(n1 * (n - n1) / n ** 2), 0.0)
    df = pd.DataFrame({"feature": fm.columns, "group": fm.groups, "r_pb": r})
    df["abs_r"] = df["r_pb"].abs()
    return df.sort_values(["abs_r", "feature"], ascending=[False, True], kind="mergesort").reset_index(drop=True)


# ---------------------------------------------------------------------------
# aggregation

def _collapse_label(spec: FeatureSpec, business_hours) -> str | None:
    """Aggregate bucket of a fine-grained column, or None when the column is kept as is."""
    w, lab = spec.window, spec.window_label
    if w == "DAY":
        return "DaysWeekend" if datetime.strptime(lab[3:], "%Y%m%d").weekday() >= 5 else "DaysWeekday"
    if w == "DAY_OF_WEEK":
        return "DowWeekend" if DOW_NAMES.index(lab[len("DayOfWeek"):]) >= 5 else "DowWeekday"
    if w == "HOUR_OF_DAY":
        h = int(lab[4:])
        return "HoursOffice" if business_hours[0] <= h < business_hours[1] else "HoursRest"
    if w == "WEEK":
        return "Weeks" if lab != "Total" else None
    if w == "MONTH":
        return "Months"
    if w in ("DOW_TOD", "HOUR_OF_WEEK"):
        day = lab[len("HourOfWeek"):][:3] if w == "HOUR_OF_WEEK" else lab[:3]
        return "CellsWeekend" if day in ("Sat", "Sun") else "CellsWeekday"
    return None


def aggregate_features(fm: FeatureMatrix, business_hours=(8, 18)) -> FeatureMatrix:
    """Collapse per-day/week/month/hour columns into weekday/weekend and office/off-hours means.

    Aggregation runs on the raw values; the result is re-normalized with the
    same train rows.
    """
    keep_specs, keep_cols = [], []
    buckets = {}
    for j, s in enumerate(fm.specs):
        b = _collapse_label(s, business_hours)
        if b is None:
            keep_specs.append(s)
            keep_cols.append(fm.raw[:, j])
        else:
            buckets.setdefault((s.group, s.stat, s.direction, s.kind, b), []).append(j)
    for (group, stat, d, kind, b), idx in sorted(buckets.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        name = f"{stat}{b}Mean{KIND_LABELS.get(kind, '') if kind else ''}{DIR_LABELS.get(d, '') if d else ''}"
        keep_specs.append(FeatureSpec(name, group, stat, "AGGREGATE", b, d, kind))
        keep_cols.append(fm.raw[:, idx].mean(axis=1))
    cols = Columns(fm.user_ids, keep_specs, np.column_stack(keep_cols))
    return assemble_and_normalize(cols, fm.train_ids)
