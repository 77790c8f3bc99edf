"""Deterministic synthetic CDR generator with a planted default signal.

Signal is planted in two places only:

* during the holiday window a dyad carries traffic only when it is
  "active"; activation probability is ``holiday_base_activation`` times the
  smaller engagement factor of its endpoints (``holiday_contact_boost`` for
  paying users, 1 for defaulters), so paying users keep roughly ``boost``
  times more holiday correspondents;
* defaulters are drawn with weights that depend mildly on a per-tower risk
  score of their home tower.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from datetime import date, datetime, timedelta, timezone

import numpy as np
import pandas as pd

from .core import Dataset, ObservationWindow, TowerRecord, UserRecord, build_dataset


class GenConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_users: int = 1000
    n_districts: int = 20
    n_towers: int = 150
    default_rate: float = 0.02
    seed: int = 0
    # communities / ties
    mean_community_size: float = 25.0
    community_overlap: float = 0.2
    intra_degree: float = 10.0
    long_range_degree: float = 2.0
    external_degree: float = 1.5
    external_pool_fraction: float = 0.3
    # activity
    calls_per_day: float = 2.5
    messages_per_day: float = 3.5
    dyad_sigma: float = 2.0
    one_way_fraction: float = 0.5
    max_dyad_rate: float = 40.0
    mean_call_seconds: float = 40.0
    zero_call_prob: float = 0.03
    # calendar
    observation_start: str = "2016-11-01"
    n_days: int = 92
    utc_offset_hours: float = 0.0
    holiday_start: str = "2016-12-24"
    holiday_end: str = "2017-01-01"
    holiday_base_activation: float = 0.33
    holiday_contact_boost: float = 3.0
    # geography
    area_km: float = 60.0
    location_signal: float = 1.0

    def validate(self):
        positive = ["n_users", "n_districts", "n_towers", "mean_community_size", "calls_per_day",
                    "messages_per_day", "dyad_sigma", "max_dyad_rate", "mean_call_seconds", "n_days",
                    "holiday_base_activation", "holiday_contact_boost", "area_km", "intra_degree"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise GenConfigError(f"{name} must be positive")
        for name in ["long_range_degree", "external_degree", "external_pool_fraction", "location_signal"]:
            if getattr(self, name) < 0:
                raise GenConfigError(f"{name} must be non-negative")
        if not 0 < self.default_rate < 1:
            raise GenConfigError("default_rate must lie in (0, 1)")
        if not (0 <= self.community_overlap <= 1 and 0 <= self.zero_call_prob < 1 and 0 <= self.one_way_fraction <= 1):
            raise GenConfigError("probabilities must lie in [0, 1]")
        if self.mean_community_size > self.n_users:
            raise GenConfigError("mean_community_size exceeds n_users")
        if self.n_users < 2:
            raise GenConfigError("need at least two users")
        start = date.fromisoformat(self.observation_start)
        end = start + timedelta(days=self.n_days - 1)
        hs, he = date.fromisoformat(self.holiday_start), date.fromisoformat(self.holiday_end)
        if not start <= hs <= he <= end:
            raise GenConfigError("holiday window must lie inside the observation window")
        return self

    @classmethod
    def from_dict(cls, obj: dict) -> "GenConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise GenConfigError(f"unknown generator keys: {sorted(unknown)}")
        return cls(**obj).validate()

    @classmethod
    def from_json(cls, path) -> "GenConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def window(self) -> ObservationWindow:
        start = date.fromisoformat(self.observation_start)
        s = int(datetime(start.year, start.month, start.day, tzinfo=timezone.utc).timestamp())
        off = int(round(self.utc_offset_hours * 3600))
        return ObservationWindow(s - off, s - off + self.n_days * 86400, self.utc_offset_hours)

    def holiday_days(self) -> tuple[int, int]:
        """Inclusive day offsets of the holiday window from the first day."""
        start = date.fromisoformat(self.observation_start)
        return ((date.fromisoformat(self.holiday_start) - start).days,
                (date.fromisoformat(self.holiday_end) - start).days)


# relative hourly activity, local time
_DIURNAL = np.array([0.3, 0.15, 0.1, 0.1, 0.15, 0.3, 0.8, 1.5, 2.0, 2.2, 2.3, 2.3,
                     2.4, 2.3, 2.2, 2.2, 2.3, 2.5, 2.7, 2.8, 2.6, 2.2, 1.5, 0.8])


def _ids(prefix, n, width=None):
    width = width or max(4, len(str(n)))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def _sample_pairs(members, n_pairs, rng):
    if len(members) < 2 or n_pairs <= 0:
        return np.empty((0, 2), dtype=np.int64)
    a = rng.choice(members, size=n_pairs)
    b = rng.choice(members, size=n_pairs)
    keep = a != b
    return np.stack([a[keep], b[keep]], axis=1)


def _unique_undirected(pairs):
    if len(pairs) == 0:
        return pairs
    lo = np.minimum(pairs[:, 0], pairs[:, 1])
    hi = np.maximum(pairs[:, 0], pairs[:, 1])
    return np.unique(np.stack([lo, hi], axis=1), axis=0)


def generate(config: GenConfig | None = None) -> Dataset:
    """Generate a synthetic Dataset. Identical config gives identical output."""
    cfg = (config or GenConfig()).validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_users

    # geography
    tower_xy = rng.uniform(0, cfg.area_km, size=(cfg.n_towers, 2))
    centers = rng.uniform(0, cfg.area_km, size=(cfg.n_districts, 2))
    tower_district = np.argmin(((tower_xy[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    tower_dist = np.sqrt(((tower_xy[:, None, :] - tower_xy[None]) ** 2).sum(-1))

    district = rng.integers(0, cfg.n_districts, size=n)
    home = np.empty(n, dtype=np.int64)
    for d in range(cfg.n_districts):
        idx = np.flatnonzero(district == d)
        pool = np.flatnonzero(tower_district == d)
        if len(pool) == 0:
            pool = np.array([np.argmin(((tower_xy - centers[d]) ** 2).sum(1))])
        home[idx] = rng.choice(pool, size=len(idx))
    near = np.exp(-tower_dist / 8.0)
    np.fill_diagonal(near, 0.0)
    cum = np.cumsum(near, axis=1)
    cum /= cum[:, -1:]
    work = np.array([np.searchsorted(cum[h], u) for h, u in zip(home, rng.random(n))])
    work = np.minimum(work, cfg.n_towers - 1)
    order = np.argsort(tower_dist, axis=1)
    excursions = order[home, 1:4] if cfg.n_towers > 1 else np.repeat(home[:, None], 3, axis=1)
    if excursions.shape[1] < 3:
        excursions = np.repeat(excursions[:, :1], 3, axis=1)

    # labels: Gumbel top-k with home-tower risk logits
    risk = rng.normal(size=cfg.n_towers)
    n_def = math.ceil(cfg.default_rate * n - 1e-9)
    keys = cfg.location_signal * risk[home] + rng.gumbel(size=n)
    defaulter = np.zeros(n, dtype=bool)
    defaulter[np.argsort(-keys, kind="stable")[:n_def]] = True
    age = rng.integers(18, 80, size=n)
    gender = rng.choice(np.array(["F", "M"]), size=n)

    # overlapping planted communities
    n_comm = max(1, int(round(n * (1 + cfg.community_overlap) / cfg.mean_community_size)))
    comm_district = rng.integers(0, cfg.n_districts, size=n_comm)
    by_district = {d: np.flatnonzero(comm_district == d) for d in range(cfg.n_districts)}
    primary = rng.integers(0, n_comm, size=n)
    local_pick = rng.random(n) < 0.5
    for u in np.flatnonzero(local_pick):
        pool = by_district[district[u]]
        if len(pool):
            primary[u] = pool[rng.integers(len(pool))]
    memberships = [[c] for c in primary]
    second = rng.random(n) < cfg.community_overlap
    for u in np.flatnonzero(second):
        if n_comm > 1:
            c = rng.integers(n_comm - 1)
            memberships[u].append(c + (c >= primary[u]))
    members = [[] for _ in range(n_comm)]
    for u, cs in enumerate(memberships):
        for c in cs:
            members[c].append(u)

    pairs = []
    for c in range(n_comm):
        m = np.array(members[c], dtype=np.int64)
        k = min(cfg.intra_degree, len(m) - 1)
        pairs.append(_sample_pairs(m, int(round(len(m) * k / 2)), rng))
    pairs.append(_sample_pairs(np.arange(n), int(round(n * cfg.long_range_degree / 2)), rng))
    user_pairs = _unique_undirected(np.concatenate(pairs))

    n_ext_pool = max(1, int(n * cfg.external_pool_fraction))
    ext_count = rng.poisson(cfg.external_degree, size=n)
    ext_src = np.repeat(np.arange(n), ext_count)
    ext_dst = n + rng.integers(0, n_ext_pool, size=len(ext_src))
    ext_pairs = np.unique(np.stack([ext_src, ext_dst], axis=1), axis=0)
    dyads = np.concatenate([user_pairs, ext_pairs]) if len(ext_pairs) else user_pairs
    n_dyads = len(dyads)

    # dyad rates (events/day), direction split and message share
    raw = np.minimum(rng.lognormal(0.0, cfg.dyad_sigma, size=n_dyads), 1e6)
    split = rng.beta(0.5, 0.5, size=n_dyads)
    one_way = rng.random(n_dyads) < cfg.one_way_fraction
    split[one_way] = (rng.random(one_way.sum()) < 0.5).astype(float)
    msg_mean = cfg.messages_per_day / (cfg.messages_per_day + cfg.calls_per_day)
    msg_share = rng.beta(2 * msg_mean, 2 * (1 - msg_mean), size=n_dyads)
    src = np.concatenate([dyads[:, 0], dyads[:, 1]])
    dst = np.concatenate([dyads[:, 1], dyads[:, 0]])
    rate = np.concatenate([raw * split, raw * (1 - split)])
    share = np.concatenate([msg_share, msg_share])
    from_user = src < n
    call_rate = rate * (1 - share)
    msg_rate = rate * share
    call_rate *= cfg.calls_per_day * n / call_rate[from_user].sum()
    msg_rate *= cfg.messages_per_day * n / msg_rate[from_user].sum()
    call_rate = np.minimum(call_rate, cfg.max_dyad_rate)
    msg_rate = np.minimum(msg_rate, cfg.max_dyad_rate)

    # holiday activation per undirected dyad
    h0, h1 = cfg.holiday_days()
    n_hol = h1 - h0 + 1
    n_norm = cfg.n_days - n_hol
    engage = np.ones(n + n_ext_pool)
    engage[:n][~defaulter] = cfg.holiday_contact_boost
    engage[n:] = cfg.holiday_contact_boost
    p_active = np.minimum(1.0, cfg.holiday_base_activation * np.minimum(engage[dyads[:, 0]], engage[dyads[:, 1]]))
    active = rng.random(n_dyads) < p_active
    active_dir = np.concatenate([active, active])

    normal_days = np.array([d for d in range(cfg.n_days) if not h0 <= d <= h1], dtype=np.int64)
    holiday_days = np.arange(h0, h1 + 1, dtype=np.int64)
    start = date.fromisoformat(cfg.observation_start)
    weekday = np.array([(start + timedelta(days=int(d))).weekday() for d in range(cfg.n_days)])
    day_weight = np.where(weekday >= 5, 0.8, 1.0)
    norm_w = day_weight[normal_days] / day_weight[normal_days].sum()

    chunks = []
    for kind_code, r in ((0, call_rate), (1, msg_rate)):
        cnt = rng.poisson(r * n_norm)
        chunks.append((np.repeat(src, cnt), np.repeat(dst, cnt), np.full(cnt.sum(), kind_code),
                       normal_days[rng.choice(len(normal_days), size=cnt.sum(), p=norm_w)]))
        hcnt = rng.poisson(r * n_hol) * active_dir
        chunks.append((np.repeat(src, hcnt), np.repeat(dst, hcnt), np.full(hcnt.sum(), kind_code),
                       holiday_days[rng.integers(0, n_hol, size=hcnt.sum())]))
    # greetings: one message per open direction of every active dyad, half of them on the first holiday day
    act = np.flatnonzero(active)
    gday = np.where(rng.random(len(act)) < 0.5, h0, holiday_days[rng.integers(0, n_hol, size=len(act))])
    fwd, bwd = act[split[act] > 0], act[split[act] < 1]
    chunks.append((np.concatenate([dyads[fwd, 0], dyads[bwd, 1]]), np.concatenate([dyads[fwd, 1], dyads[bwd, 0]]),
                   np.ones(len(fwd) + len(bwd), dtype=np.int64),
                   np.concatenate([gday[split[act] > 0], gday[split[act] < 1]])))

    e_src = np.concatenate([c[0] for c in chunks])
    e_dst = np.concatenate([c[1] for c in chunks])
    e_kind = np.concatenate([c[2] for c in chunks])
    e_day = np.concatenate([c[3] for c in chunks])
    m = len(e_src)
    hour = rng.choice(24, size=m, p=_DIURNAL / _DIURNAL.sum())
    sec = rng.integers(0, 3600, size=m)
    window = cfg.window()
    ts = window.start + e_day * 86400 + hour * 3600 + sec

    dur = np.zeros(m, dtype=np.int64)
    calls = e_kind == 0
    mu = math.log(cfg.mean_call_seconds) - 0.5
    dur[calls] = np.maximum(1, np.round(rng.lognormal(mu, 1.0, size=calls.sum()))).astype(np.int64)
    dur[calls & (rng.random(m) < cfg.zero_call_prob)] = 0

    # caller's serving tower: work during weekday office hours, home otherwise, occasional excursions
    user_caller = e_src < n
    uc = np.where(user_caller, e_src, 0)
    office = (weekday[e_day] < 5) & (hour >= 8) & (hour < 18)
    u = rng.random(m)
    tower = np.where(office & (u < 0.75), work[uc], home[uc])
    exc = rng.random(m) < 0.1
    tower = np.where(exc, excursions[uc, rng.integers(0, excursions.shape[1], size=m)], tower)

    user_ids = np.array(_ids("u", n))
    ext_ids = np.array(_ids("x", n_ext_pool))
    tower_ids = np.array(_ids("t", cfg.n_towers))
    all_ids = np.concatenate([user_ids, ext_ids])
    events = pd.DataFrame({
        "ts": ts.astype(np.int64),
        "caller": all_ids[e_src],
        "callee": all_ids[e_dst],
        "kind": np.where(calls, "CALL", "MESSAGE"),
        "duration": dur,
        "tower": np.where(user_caller, tower_ids[tower], ""),
    })
    district_ids = _ids("d", cfg.n_districts, 3)
    users = {
        uid: UserRecord(uid, int(age[i]), str(gender[i]), district_ids[district[i]], bool(defaulter[i]))
        for i, uid in enumerate(user_ids.tolist())
    }
    towers = {tid: TowerRecord(tid, float(round(tower_xy[i, 0], 4)), float(round(tower_xy[i, 1], 4)))
              for i, tid in enumerate(tower_ids.tolist())}
    return build_dataset(events, users, towers, window)


def holiday_unique_correspondents(dataset: Dataset, config: GenConfig) -> pd.Series:
    """Distinct correspondents (either direction) of every user during the holiday window."""
    h0, h1 = config.holiday_days()
    lo = dataset.window.start + h0 * 86400
    hi = dataset.window.start + (h1 + 1) * 86400
    ev = dataset.events
    ev = ev[(ev["ts"] >= lo) & (ev["ts"] < hi)]
    both = pd.concat([
        pd.DataFrame({"user": ev["caller"].to_numpy(), "other": ev["callee"].to_numpy()}),
        pd.DataFrame({"user": ev["callee"].to_numpy(), "other": ev["caller"].to_numpy()}),
    ])
    counts = both.drop_duplicates().groupby("user").size()
    return counts.reindex(dataset.user_ids, fill_value=0)
