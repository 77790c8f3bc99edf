"""Data model, CSV ingestion, time-window taxonomy and train/test splitting."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

EVENT_HEADER = ["timestamp", "caller_id", "callee_id", "kind", "duration_s", "tower_id"]
USER_HEADER = ["user_id", "age", "gender", "district_id", "default"]
TOWER_HEADER = ["tower_id", "x_km", "y_km"]

# events.csv uses SMS on the wire, MESSAGE internally
WIRE_KIND = {"CALL": "CALL", "SMS": "MESSAGE"}
KIND_WIRE = {"CALL": "CALL", "MESSAGE": "SMS"}

MAX_REJECT_FRACTION = 0.01
TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class DatasetError(ValueError):
    """Raised when input files cannot be turned into a valid Dataset."""


class StratificationWarning(UserWarning):
    pass


class Kind(str, enum.Enum):
    CALL = "CALL"
    MESSAGE = "MESSAGE"


class WindowTag(str, enum.Enum):
    HOUR_OF_DAY = "HOUR_OF_DAY"
    DAY = "DAY"
    DAY_OF_WEEK = "DAY_OF_WEEK"
    WEEK = "WEEK"
    MONTH = "MONTH"
    BUSINESS_HOURS = "BUSINESS_HOURS"
    NON_BUSINESS = "NON_BUSINESS"
    WEEKEND = "WEEKEND"
    WEEKDAY = "WEEKDAY"
    TOTAL = "TOTAL"


@dataclass(frozen=True)
class CdrEvent:
    timestamp: int
    caller_id: str
    callee_id: str
    kind: Kind
    duration: int
    tower_id: str

    def __post_init__(self):
        if self.caller_id == self.callee_id:
            raise ValueError("caller_id and callee_id must differ")
        if self.duration < 0:
            raise ValueError("duration must be non-negative")


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    age: int
    gender: str
    district_id: str
    default_status: bool


@dataclass(frozen=True)
class TowerRecord:
    tower_id: str
    x: float
    y: float


def format_ts(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime(TS_FORMAT)


def parse_ts(text: str) -> int:
    return int(datetime.strptime(text, TS_FORMAT).replace(tzinfo=timezone.utc).timestamp())


@dataclass(frozen=True)
class ObservationWindow:
    """Observation interval [start, end) in UTC seconds plus local-time conventions."""

    start: int
    end: int
    utc_offset_hours: float = 0.0
    business_start_hour: int = 8
    business_end_hour: int = 18

    def __post_init__(self):
        if self.end <= self.start:
            raise ValueError("observation window end must follow start")
        if not 0 <= self.business_start_hour < self.business_end_hour <= 24:
            raise ValueError("business hours must satisfy 0 <= start < end <= 24")

    @property
    def offset_seconds(self) -> int:
        return int(round(self.utc_offset_hours * 3600))

    @property
    def n_days(self) -> int:
        first, last = self.local_day_bounds()
        return (last - first).days + 1

    @property
    def n_weeks(self) -> float:
        return (self.end - self.start) / (7 * 86400)

    def local_day_bounds(self):
        off = self.offset_seconds
        first = datetime.fromtimestamp(self.start + off, tz=timezone.utc).date()
        last = datetime.fromtimestamp(self.end - 1 + off, tz=timezone.utc).date()
        return first, last

    def to_json(self) -> dict:
        return {
            "observation_start": format_ts(self.start),
            "observation_end": format_ts(self.end),
            "utc_offset_hours": self.utc_offset_hours,
            "business_hours": [self.business_start_hour, self.business_end_hour],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ObservationWindow":
        unknown = set(obj) - {"observation_start", "observation_end", "utc_offset_hours", "business_hours"}
        if unknown:
            raise DatasetError(f"unknown dataset config keys: {sorted(unknown)}")
        bh = obj.get("business_hours", [8, 18])
        return cls(
            start=parse_ts(obj["observation_start"]),
            end=parse_ts(obj["observation_end"]),
            utc_offset_hours=float(obj.get("utc_offset_hours", 0.0)),
            business_start_hour=int(bh[0]),
            business_end_hour=int(bh[1]),
        )


@dataclass(frozen=True)
class TimeWindow:
    """One concrete window of a taxonomy.

    Calendar windows (DAY, WEEK, MONTH, TOTAL) carry UTC bounds [start, end);
    recurring windows (HOUR_OF_DAY, DAY_OF_WEEK, business/weekend splits)
    carry ``start = end = None`` and are defined by local clock fields.
    """

    tag: WindowTag
    label: str
    start: int | None = None
    end: int | None = None


DOW_NAMES = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"]


class Calendar:
    """Maps UTC timestamps onto the window taxonomy of an observation window."""

    def __init__(self, window: ObservationWindow):
        self.window = window
        self.first_day, self.last_day = window.local_day_bounds()
        self._origin = int(
            datetime(self.first_day.year, self.first_day.month, self.first_day.day, tzinfo=timezone.utc).timestamp()
        )
        self.days = [self.first_day + timedelta(days=i) for i in range(window.n_days)]
        self._first_monday = self.first_day - timedelta(days=self.first_day.weekday())
        self.n_weeks = (self.days[-1] - self._first_monday).days // 7 + 1
        months = []
        for d in self.days:
            if (d.year, d.month) not in months:
                months.append((d.year, d.month))
        self.months = months

    def local(self, ts):
        return np.asarray(ts, dtype=np.int64) + self.window.offset_seconds

    def day_index(self, ts):
        return (self.local(ts) - self._origin) // 86400

    def hour(self, ts):
        return (self.local(ts) % 86400) // 3600

    def dow(self, ts):
        # 1970-01-01 was a Thursday (weekday 3)
        return ((self.local(ts) // 86400) + 3) % 7

    def is_business(self, ts):
        h = self.hour(ts)
        w = self.window
        return (self.dow(ts) < 5) & (h >= w.business_start_hour) & (h < w.business_end_hour)

    def windows(self, tag: WindowTag) -> list[TimeWindow]:
        off = self.window.offset_seconds
        if tag is WindowTag.HOUR_OF_DAY:
            return [TimeWindow(tag, f"Hour{h:02d}") for h in range(24)]
        if tag is WindowTag.DAY_OF_WEEK:
            return [TimeWindow(tag, f"DayOfWeek{n}") for n in DOW_NAMES]
        if tag is WindowTag.DAY:
            out = []
            for i, d in enumerate(self.days):
                s = self._origin + i * 86400 - off
                out.append(TimeWindow(tag, f"Day{d:%Y%m%d}", max(s, self.window.start), min(s + 86400, self.window.end)))
            return out
        if tag is WindowTag.WEEK:
            out = []
            for k in range(self.n_weeks):
                monday = self._first_monday + timedelta(days=7 * k)
                s = self._origin + (monday - self.first_day).days * 86400 - off
                out.append(TimeWindow(tag, f"Week{monday:%Y%m%d}", max(s, self.window.start), min(s + 7 * 86400, self.window.end)))
            return out
        if tag is WindowTag.MONTH:
            out = []
            for y, m in self.months:
                s = int(datetime(y, m, 1, tzinfo=timezone.utc).timestamp()) - off
                ny, nm = (y + 1, 1) if m == 12 else (y, m + 1)
                e = int(datetime(ny, nm, 1, tzinfo=timezone.utc).timestamp()) - off
                out.append(TimeWindow(tag, f"Month{y:04d}{m:02d}", max(s, self.window.start), min(e, self.window.end)))
            return out
        if tag is WindowTag.BUSINESS_HOURS:
            return [TimeWindow(tag, "Office")]
        if tag is WindowTag.NON_BUSINESS:
            return [TimeWindow(tag, "Rest")]
        if tag is WindowTag.WEEKEND:
            return [TimeWindow(tag, "Weekend")]
        if tag is WindowTag.WEEKDAY:
            return [TimeWindow(tag, "Weekday")]
        return [TimeWindow(WindowTag.TOTAL, "Total", self.window.start, self.window.end)]

    def assign(self, tag: WindowTag, ts) -> np.ndarray:
        """Window index of each timestamp within taxonomy ``tag`` (-1 = outside every window)."""
        ts = np.asarray(ts, dtype=np.int64)
        if tag is WindowTag.HOUR_OF_DAY:
            return self.hour(ts)
        if tag is WindowTag.DAY_OF_WEEK:
            return self.dow(ts)
        if tag is WindowTag.DAY:
            return self.day_index(ts)
        if tag is WindowTag.WEEK:
            offset = (self.first_day - self._first_monday).days
            return (self.day_index(ts) + offset) // 7
        if tag is WindowTag.MONTH:
            local = pd.to_datetime(self.local(ts), unit="s")
            code = np.asarray(local.year * 12 + local.month - 1, dtype=np.int64)
            first = self.months[0][0] * 12 + self.months[0][1] - 1
            return code - first
        zeros = np.zeros(ts.shape, dtype=np.int64)
        if tag is WindowTag.BUSINESS_HOURS:
            return np.where(self.is_business(ts), zeros, -1)
        if tag is WindowTag.NON_BUSINESS:
            return np.where(self.is_business(ts), -1, zeros)
        if tag is WindowTag.WEEKEND:
            return np.where(self.dow(ts) >= 5, zeros, -1)
        if tag is WindowTag.WEEKDAY:
            return np.where(self.dow(ts) < 5, zeros, -1)
        return zeros


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated CDR dataset.

    ``events`` is a DataFrame sorted by (timestamp, caller, callee) with columns
    ``ts, caller, callee, kind, duration, tower, external, zero_call``.
    ``external`` marks events with a party missing from ``users``.
    """

    events: pd.DataFrame
    users: dict
    towers: dict
    window: ObservationWindow
    n_rejected: int = 0
    reject_reasons: dict = field(default_factory=dict)

    @property
    def user_ids(self) -> list[str]:
        return sorted(self.users)

    def labels(self, ids=None) -> np.ndarray:
        ids = self.user_ids if ids is None else ids
        return np.array([self.users[u].default_status for u in ids], dtype=np.int8)

    def user_frame(self) -> pd.DataFrame:
        rows = [(u.user_id, u.age, u.gender, u.district_id, int(u.default_status)) for u in self.users.values()]
        return pd.DataFrame(rows, columns=USER_HEADER).sort_values("user_id", ignore_index=True)

    def tower_frame(self) -> pd.DataFrame:
        rows = [(t.tower_id, t.x, t.y) for t in self.towers.values()]
        return pd.DataFrame(rows, columns=TOWER_HEADER).sort_values("tower_id", ignore_index=True)

    def iter_events(self):
        for row in self.events.itertuples(index=False):
            yield CdrEvent(int(row.ts), row.caller, row.callee, Kind(row.kind), int(row.duration), row.tower)

    def with_labels(self, new_labels: dict) -> "Dataset":
        """Copy with some users' default status replaced (used by leakage checks)."""
        users = dict(self.users)
        for uid, y in new_labels.items():
            u = users[uid]
            users[uid] = UserRecord(u.user_id, u.age, u.gender, u.district_id, bool(y))
        return Dataset(self.events, users, self.towers, self.window, self.n_rejected, dict(self.reject_reasons))


def _sort_events(ev: pd.DataFrame) -> pd.DataFrame:
    return ev.sort_values(["ts", "caller", "callee"], kind="mergesort", ignore_index=True)


def build_dataset(events: pd.DataFrame, users: dict, towers: dict, window: ObservationWindow,
                  n_rejected: int = 0, reject_reasons: dict | None = None) -> Dataset:
    """Assemble a Dataset from an already-clean events frame (ts, caller, callee, kind, duration, tower)."""
    ev = events[["ts", "caller", "callee", "kind", "duration", "tower"]].copy()
    ev["ts"] = ev["ts"].astype(np.int64)
    ev["duration"] = ev["duration"].astype(np.int64)
    known = pd.Index(list(users))
    ev["external"] = ~(ev["caller"].isin(known) & ev["callee"].isin(known))
    ev["zero_call"] = (ev["kind"] == "CALL") & (ev["duration"] == 0)
    return Dataset(_sort_events(ev), users, towers, window, n_rejected, dict(reject_reasons or {}))


def _read_csv(path, header):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    if list(df.columns) != header:
        raise DatasetError(f"{os.path.basename(path)}: header {list(df.columns)} != expected {header}")
    return df


def _load_users(path) -> dict:
    df = _read_csv(path, USER_HEADER)
    users = {}
    for row in df.itertuples(index=False):
        if row.user_id in users:
            raise DatasetError(f"duplicate user_id {row.user_id}")
        if row.default not in ("0", "1") or not row.user_id:
            raise DatasetError(f"bad user row for {row.user_id!r}")
        try:
            age = int(row.age)
        except ValueError as exc:
            raise DatasetError(f"bad age for user {row.user_id}") from exc
        users[row.user_id] = UserRecord(row.user_id, age, row.gender, row.district_id, row.default == "1")
    return users


def _load_towers(path) -> dict:
    df = _read_csv(path, TOWER_HEADER)
    towers = {}
    for row in df.itertuples(index=False):
        x, y = float(row.x_km), float(row.y_km)
        if row.tower_id in towers or not (math.isfinite(x) and math.isfinite(y)):
            raise DatasetError(f"bad tower row {row.tower_id!r}")
        towers[row.tower_id] = TowerRecord(row.tower_id, x, y)
    return towers


def _infer_window(ts: np.ndarray) -> ObservationWindow:
    lo = int(ts.min()) // 86400 * 86400
    hi = (int(ts.max()) // 86400 + 1) * 86400
    return ObservationWindow(lo, hi)


def parse_dataset(events_path, users_path, towers_path, config=None) -> Dataset:
    """Read and validate the three CSV inputs.

    ``config`` is an ObservationWindow, a dict in dataset.json form, a path to
    such a JSON file, or None (window inferred from the event timestamps).
    Malformed event rows are dropped and counted; more than 1% aborts.
    """
    users = _load_users(users_path)
    towers = _load_towers(towers_path)
    raw = _read_csv(events_path, EVENT_HEADER)

    if isinstance(config, (str, os.PathLike)):
        with open(config) as fh:
            config = json.load(fh)
    if isinstance(config, dict):
        config = ObservationWindow.from_json(config)

    n = len(raw)
    reasons = {}
    ts = pd.to_datetime(raw["timestamp"], format=TS_FORMAT, errors="coerce", utc=True)
    bad_ts = ts.isna().to_numpy()
    ts_sec = ((ts - pd.Timestamp(0, tz="UTC")) // pd.Timedelta(seconds=1)).fillna(0).astype(np.int64).to_numpy()
    kind = raw["kind"].map(WIRE_KIND)
    bad_kind = kind.isna().to_numpy()
    dur = pd.to_numeric(raw["duration_s"], errors="coerce")
    bad_dur = (dur.isna() | (dur < 0) | (dur != dur.round())).to_numpy()
    bad_ids = ((raw["caller_id"] == "") | (raw["callee_id"] == "")).to_numpy()
    self_loop = (raw["caller_id"] == raw["callee_id"]).to_numpy()
    bad_tower = ~(raw["tower_id"].isin(list(towers)) | (raw["tower_id"] == "")).to_numpy()
    if config is None:
        ok_ts = ts_sec[~bad_ts]
        config = _infer_window(ok_ts) if len(ok_ts) else ObservationWindow(0, 86400)
    out_of_window = ~bad_ts & ((ts_sec < config.start) | (ts_sec >= config.end))

    for name, mask in [("timestamp", bad_ts), ("kind", bad_kind), ("duration", bad_dur), ("missing_id", bad_ids),
                       ("self_loop", self_loop), ("unknown_tower", bad_tower), ("out_of_window", out_of_window)]:
        if mask.any():
            reasons[name] = int(mask.sum())
    bad = bad_ts | bad_kind | bad_dur | bad_ids | self_loop | bad_tower | out_of_window
    n_bad = int(bad.sum())
    if n and n_bad / n > MAX_REJECT_FRACTION:
        raise DatasetError(f"{n_bad}/{n} malformed event rows exceed 1%: {reasons}")
    if n_bad:
        log.warning("rejected %d event rows: %s", n_bad, reasons)

    keep = ~bad
    ev = pd.DataFrame({
        "ts": ts_sec[keep],
        "caller": raw["caller_id"].to_numpy()[keep],
        "callee": raw["callee_id"].to_numpy()[keep],
        "kind": kind.to_numpy()[keep],
        "duration": dur.to_numpy()[keep].astype(np.int64),
        "tower": raw["tower_id"].to_numpy()[keep],
    })
    return build_dataset(ev, users, towers, config, n_bad, reasons)


def load_dataset_dir(path) -> Dataset:
    cfg = os.path.join(path, "dataset.json")
    return parse_dataset(os.path.join(path, "events.csv"), os.path.join(path, "users.csv"),
                         os.path.join(path, "towers.csv"), cfg if os.path.exists(cfg) else None)


def write_dataset(dataset: Dataset, out_dir) -> dict:
    """Serialize to events.csv, users.csv, towers.csv and dataset.json. Returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    ev = dataset.events
    stamps = pd.to_datetime(ev["ts"].to_numpy(), unit="s").strftime(TS_FORMAT)
    out = pd.DataFrame({
        "timestamp": stamps,
        "caller_id": ev["caller"].to_numpy(),
        "callee_id": ev["callee"].to_numpy(),
        "kind": ev["kind"].map(KIND_WIRE).to_numpy(),
        "duration_s": ev["duration"].to_numpy(),
        "tower_id": ev["tower"].to_numpy(),
    })
    paths = {name: os.path.join(out_dir, f"{name}.csv") for name in ("events", "users", "towers")}
    out.to_csv(paths["events"], index=False)
    dataset.user_frame().assign(default=lambda d: d["default"].astype(int)).to_csv(paths["users"], index=False)
    dataset.tower_frame().to_csv(paths["towers"], index=False)
    paths["config"] = os.path.join(out_dir, "dataset.json")
    with open(paths["config"], "w") as fh:
        json.dump(dataset.window.to_json(), fh, indent=2)
    return paths


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_train_test(dataset_or_labels, fraction: float = 0.7, seed: int = 0):
    """Stratified user-level split.

    Accepts a Dataset or a mapping ``user_id -> label``. Each class contributes
    ``round(fraction * class_size)`` users to the train side, so class counts
    deviate from exact proportionality by at most one user.
    Returns sorted ``(train_ids, test_ids)``.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    if isinstance(dataset_or_labels, Dataset):
        labels = {u: int(r.default_status) for u, r in dataset_or_labels.users.items()}
    else:
        labels = {u: int(y) for u, y in dataset_or_labels.items()}
    ids = sorted(labels)
    y = np.array([labels[u] for u in ids])
    rng = np.random.default_rng(seed)
    n_train_total = _round_half_up(fraction * len(ids))
    train = []
    classes = sorted(set(y.tolist()))
    # positives first, negatives absorb the remainder of the total
    alloc = {}
    for c in classes[::-1][:-1]:
        alloc[c] = _round_half_up(fraction * int((y == c).sum()))
    alloc[classes[0]] = n_train_total - sum(alloc.values())
    for c in classes:
        members = np.array([u for u, yy in zip(ids, y) if yy == c])
        if len(members) < 2:
            warnings.warn(f"class {c} has {len(members)} member(s); cannot stratify it across both sides",
                          StratificationWarning, stacklevel=2)
        k = min(max(alloc[c], 0), len(members))
        perm = rng.permutation(len(members))
        train.extend(members[perm[:k]].tolist())
    train_set = set(train)
    return sorted(train_set), [u for u in ids if u not in train_set]
