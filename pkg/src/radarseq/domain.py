"""Courier timelines, the 14-feature schema, min-max statistics, churn labels and user-level splits."""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

FEATURES: tuple[str, ...] = (
    "avg_orders_7d",
    "avg_earnings_7d",
    "delta_orders",
    "acceptance_rate",
    "activity_score",
    "b2v_distance",
    "lunch_trips",
    "assigns",
    "avg_ride_time",
    "batch_trips",
    "ltv",
    "avg_dist_per_delivery",
    "avg_daily_trips",
    "avg_daily_income",
)

UNITS: tuple[str, ...] = (
    "deliveries/day, trailing 7 days",
    "currency/day, trailing 7 days",
    "deliveries, this week minus previous week",
    "accepted / offered",
    "mean of login, acceptance and completion rates",
    "km, courier to vendor at assignment",
    "deliveries 11:00-14:00",
    "orders assigned",
    "minutes, pickup to drop-off",
    "deliveries in multi-order dispatches",
    "currency, discounted revenue stream",
    "km per delivery",
    "deliveries per active day, trailing 28 days",
    "currency per active day, trailing 28 days",
)

N_FEATURES = len(FEATURES)
CHURN_HORIZON = 45
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    """Input data violates a schema or invariant."""


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple[str, ...] = FEATURES
    units: tuple[str, ...] = UNITS

    def __post_init__(self):
        if len(self.names) != N_FEATURES or len(self.units) != N_FEATURES:
            raise DataError(f"schema needs exactly {N_FEATURES} features, got {len(self.names)}")
        if tuple(self.names) != FEATURES:
            raise DataError("feature names must follow the canonical order")

    @property
    def d(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


SCHEMA = FeatureSchema()


def _to_day(d) -> np.datetime64:
    return np.datetime64(d, "D")


@dataclass(frozen=True, eq=False)
class CourierTimeline:
    """One courier's dated feature rows plus the set of days with any platform activity.

    ``dates`` is a strictly increasing ``datetime64[D]`` array, ``features`` is
    ``len(dates) × 14``, ``active`` a sorted unique ``datetime64[D]`` array.
    """

    courier_id: str
    dates: np.ndarray
    features: np.ndarray
    active: np.ndarray

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        feats = np.asarray(self.features, dtype=np.float64)
        active = np.unique(np.asarray(self.active, dtype="datetime64[D]"))
        if feats.ndim != 2 or feats.shape != (len(dates), N_FEATURES):
            raise DataError(f"{self.courier_id}: features shape {feats.shape} != ({len(dates)}, {N_FEATURES})")
        if len(dates) > 1 and not np.all(dates[1:] > dates[:-1]):
            raise DataError(f"{self.courier_id}: dates must be strictly increasing")
        if not np.all(np.isfinite(feats)):
            raise DataError(f"{self.courier_id}: non-finite feature values")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "active", active)

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def first_date(self) -> np.datetime64:
        return self.dates[0]

    @property
    def last_date(self) -> np.datetime64:
        return self.dates[-1]

    @property
    def days(self) -> list[tuple[dt.date, np.ndarray]]:
        return [(d.astype(dt.date), row) for d, row in zip(self.dates, self.features)]

    def dense(self, start, end) -> tuple[np.ndarray, np.ndarray]:
        """Feature rows for every calendar day in [start, end]; missing days are zero.

        Returns ``(features, has_row)``.
        """
        start, end = _to_day(start), _to_day(end)
        n = int((end - start).astype(int)) + 1
        out = np.zeros((n, N_FEATURES))
        has = np.zeros(n, dtype=bool)
        lo, hi = np.searchsorted(self.dates, [start, end + 1])
        pos = (self.dates[lo:hi] - start).astype(int)
        out[pos] = self.features[lo:hi]
        has[pos] = True
        return out, has


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class NormStats:
    mins: np.ndarray
    maxs: np.ndarray
    fitted_on: str = "train"

    def __post_init__(self):
        mins = np.asarray(self.mins, dtype=np.float64)
        maxs = np.asarray(self.maxs, dtype=np.float64)
        if mins.shape != (N_FEATURES,) or maxs.shape != (N_FEATURES,):
            raise DataError("NormStats needs one (min, max) pair per feature")
        if np.any(mins > maxs):
            raise DataError("NormStats: min > max")
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)

    @property
    def degenerate(self) -> np.ndarray:
        return self.mins == self.maxs

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "min", "max"])
            for name, lo, hi in zip(FEATURES, self.mins, self.maxs):
                w.writerow([name, repr(float(lo)), repr(float(hi))])

    @classmethod
    def from_csv(cls, path, fitted_on: str = "train") -> "NormStats":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        by_name = {r["feature"]: (float(r["min"]), float(r["max"])) for r in rows}
        missing = [f for f in FEATURES if f not in by_name]
        if missing:
            raise DataError(f"{path}: missing features {missing}")
        return cls(np.array([by_name[f][0] for f in FEATURES]),
                   np.array([by_name[f][1] for f in FEATURES]), fitted_on)


def fit_norm_stats(timelines: Iterable[CourierTimeline], fitted_on: str = "train") -> NormStats:
    mins = np.full(N_FEATURES, np.inf)
    maxs = np.full(N_FEATURES, -np.inf)
    seen = False
    for tl in timelines:
        if len(tl) == 0:
            continue
        seen = True
        mins = np.minimum(mins, tl.features.min(axis=0))
        maxs = np.maximum(maxs, tl.features.max(axis=0))
    if not seen:
        raise DataError("no training data")
    return NormStats(mins, maxs, fitted_on)


def normalize(features, stats: NormStats) -> np.ndarray:
    """Min-max scale to [0, 1] with clamping; degenerate features map to 0.5."""
    x = np.asarray(features, dtype=np.float64)
    span = stats.maxs - stats.mins
    deg = span == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (x - stats.mins) / np.where(deg, 1.0, span)
    out = np.clip(out, 0.0, 1.0)
    return np.where(deg, 0.5, out)


# ---------------------------------------------------------------- labels

@dataclass(frozen=True)
class ChurnLabel:
    value: int
    reference_date: dt.date
    horizon_days: int = CHURN_HORIZON
    censored: bool = False


def assign_label(timeline: CourierTimeline, reference_date, horizon: int = CHURN_HORIZON,
                 dataset_end=None) -> ChurnLabel:
    """1 iff the courier has no active day in (reference_date, reference_date + horizon].

    When ``dataset_end`` is given and the horizon runs past it the label is
    marked censored (its value is still computed from the observed days).
    """
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    ref = _to_day(reference_date)
    if len(timeline) == 0 or ref < timeline.first_date:
        raise DataError(f"{timeline.courier_id}: reference date {ref} precedes timeline start")
    lo = np.searchsorted(timeline.active, ref, side="right")
    hi = np.searchsorted(timeline.active, ref + horizon, side="right")
    value = int(hi == lo)
    censored = dataset_end is not None and ref + horizon > _to_day(dataset_end)
    return ChurnLabel(value, ref.astype(dt.date), horizon, bool(censored))


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitAssignment:
    mapping: Mapping[str, str]
    seed: int

    def __getitem__(self, courier_id: str) -> str:
        return self.mapping[courier_id]

    def members(self, split: str) -> list[str]:
        return sorted(c for c, s in self.mapping.items() if s == split)

    def counts(self) -> dict[str, int]:
        return {s: sum(1 for v in self.mapping.values() if v == s) for s in SPLITS}


def _split_key(courier_id: str, seed: int) -> bytes:
    return hashlib.sha256(f"{seed}\x1f{courier_id}".encode("utf-8")).digest()


def make_splits(courier_ids: Sequence[str], seed: int, fractions=(0.8, 0.1, 0.1)) -> SplitAssignment:
    """Deterministic courier-level 80/10/10 partition that ignores input order.

    Couriers are ranked by a seeded hash of their id; the first 80% of the
    ranking go to train, the next 10% to val, the rest to test.
    """
    ids = list(courier_ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate courier ids")
    if len(ids) < 10:
        raise DataError("too few users to split")
    ranked = sorted(ids, key=lambda c: (_split_key(c, seed), c))
    n = len(ranked)
    n_train = int(np.floor(fractions[0] * n + 0.5))
    n_val = int(np.floor(fractions[1] * n + 0.5))
    mapping = {}
    for i, c in enumerate(ranked):
        mapping[c] = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
    return SplitAssignment(mapping, seed)


# ---------------------------------------------------------------- events CSV

EVENTS_HEADER = ("courier_id", "date") + FEATURES
ACTIVITY_FEATURE = "activity_score"


def write_events_csv(path, timelines: Iterable[CourierTimeline]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for tl in timelines:
            for d, row in zip(tl.dates, tl.features):
                w.writerow([tl.courier_id, str(d)] + [format(float(v), ".10g") for v in row])


def read_events_csv(path) -> list[CourierTimeline]:
    """Parse the events table; a day counts as active when its activity score is positive."""
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text))
    try:
        header = tuple(next(reader))
    except StopIteration:
        raise DataError(f"{path}: empty events file") from None
    if header != EVENTS_HEADER:
        raise DataError(f"{path}: header must be {','.join(EVENTS_HEADER)}")
    rows: dict[str, tuple[list, list]] = {}
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(EVENTS_HEADER):
            raise DataError(f"{path}:{lineno}: expected {len(EVENTS_HEADER)} columns, got {len(rec)}")
        try:
            day = np.datetime64(dt.date.fromisoformat(rec[1]), "D")
            vals = [float(v) for v in rec[2:]]
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        dates, feats = rows.setdefault(rec[0], ([], []))
        dates.append(day)
        feats.append(vals)
    act = FEATURES.index(ACTIVITY_FEATURE)
    out = []
    for cid in sorted(rows):
        dates, feats = rows[cid]
        d = np.array(dates, dtype="datetime64[D]")
        f = np.array(feats, dtype=np.float64)
        order = np.argsort(d, kind="stable")
        d, f = d[order], f[order]
        if len(d) > 1 and np.any(d[1:] == d[:-1]):
            raise DataError(f"{path}: duplicate date for courier {cid}")
        out.append(CourierTimeline(cid, d, f, d[f[:, act] > 0]))
    return out


def dataset_end_date(timelines: Iterable[CourierTimeline]) -> np.datetime64:
    return max(tl.last_date for tl in timelines)
