"""Synthetic courier cohorts with churn precursors.

Every courier draws from its own ``default_rng([seed, index])`` stream, so the
cohort can be generated in any order or in parallel with identical results.
With ``noise_scale == 0`` all stochastic events (idle days, vacations, slumps,
late onboarding, measurement jitter) are switched off and each timeline is an
exactly periodic skeleton until its churn ramp.
"""

from __future__ import annotations

import csv
import datetime as dt
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict

import numpy as np

from .domain import CHURN_HORIZON, FEATURES, CourierTimeline

F = {name: k for k, name in enumerate(FEATURES)}

BURN_IN = 28        # pre-history so trailing windows are filled from day 0
MAX_GAP = 45        # idle runs outside churn stay shorter than this, so labels follow the true churn date
CHURN_SPREAD = 60   # churn dates fall in the last CHURN_SPREAD days that still leave a full label horizon


@dataclass(frozen=True)
class CohortConfig:
    n_couriers: int = 800
    horizon_days: int = 200
    churn_fraction: float = 0.16
    precursor_days: int = 21
    noise_scale: float = 1.0
    seed: int = 1
    hard_churn_fraction: float = 0.3
    seasonality: float = 0.2
    late_join_fraction: float = 0.2
    idle_prob: float = 0.08
    vacation_rate: float = 2.0      # expected breaks per 100 days
    max_vacation: int = 44
    slump_rate: float = 0.5         # expected temporary declines per 100 days (retainers)
    ramp_floor: float = 0.15
    label_horizon: int = CHURN_HORIZON
    start_date: str = "2024-01-01"

    def __post_init__(self):
        if self.n_couriers < 1:
            raise ValueError("n_couriers must be positive")
        if not 0 <= self.churn_fraction < 1:
            raise ValueError("churn_fraction must lie in [0, 1)")
        if not 0 <= self.hard_churn_fraction <= 1:
            raise ValueError("hard_churn_fraction must lie in [0, 1]")
        if self.precursor_days < 2 or self.precursor_days >= self.horizon_days:
            raise ValueError("need 2 <= precursor_days < horizon_days")
        if not 1 <= self.max_vacation < MAX_GAP:
            raise ValueError(f"max_vacation must lie in [1, {MAX_GAP - 1}]")
        if self.noise_scale < 0 or self.seasonality < 0 or not 0 <= self.idle_prob < 1:
            raise ValueError("noise_scale, seasonality and idle_prob must be nonnegative (idle_prob < 1)")
        if not 0 < self.ramp_floor <= 1:
            raise ValueError("ramp_floor must lie in (0, 1]")
        lo, hi = self.churn_range
        if self.churn_fraction > 0 and lo > hi:
            raise ValueError(f"horizon_days={self.horizon_days} is too short to place churn dates")
        dt.date.fromisoformat(self.start_date)

    @property
    def churn_range(self) -> tuple[int, int]:
        hi = self.horizon_days - self.label_horizon
        return max(self.precursor_days + 14, hi - CHURN_SPREAD), hi

    @property
    def n_churners(self) -> int:
        n = int(round(self.churn_fraction * self.n_couriers))
        if self.churn_fraction > 0 and self.n_couriers >= 7:
            n = min(max(n, 1), self.n_couriers - 1)
        return n


@dataclass(frozen=True)
class Cohort:
    config: CohortConfig
    timelines: list
    churn_dates: dict      # courier_id -> np.datetime64 first permanently inactive day, or None

    @property
    def end_date(self) -> np.datetime64:
        return np.datetime64(self.config.start_date, "D") + self.config.horizon_days - 1


def courier_id(i: int) -> str:
    return f"c{i:05d}"


def _roles(cfg: CohortConfig) -> list[str]:
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    n_churn = cfg.n_churners
    n_hard = int(round(cfg.hard_churn_fraction * n_churn))
    roles = np.array(["retain"] * cfg.n_couriers, dtype=object)
    churners = rng.permutation(cfg.n_couriers)[:n_churn]
    roles[churners[:n_hard]] = "hard"
    roles[churners[n_hard:]] = "soft"
    return list(roles)


def _trailing_sum(x, k):
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    return c[idx] - c[np.maximum(idx - k, 0)]


def _cap_gaps(active, lo, hi, rng_days):
    """Re-activate days so no idle run inside [lo, hi] reaches MAX_GAP."""
    run = 0
    for t in range(lo, hi + 1):
        if active[t]:
            run = 0
            continue
        run += 1
        if run >= MAX_GAP:
            active[t] = True
            rng_days.append(t)
            run = 0


def simulate_courier(i: int, cfg: CohortConfig, role: str, latent: bool = False):
    """Return ``(CourierTimeline, churn_day_index or None)`` for courier ``i``.

    With ``latent=True`` a third item maps latent daily series (trips, earnings)
    to arrays aligned with the timeline's dates.
    """
    rng = np.random.default_rng([cfg.seed, i])
    s = cfg.noise_scale
    noisy = s > 0
    G = cfg.horizon_days
    P = cfg.precursor_days

    base = rng.uniform(6.0, 16.0)
    pay = rng.uniform(3.5, 6.5)
    acc0, comp0, login0 = rng.uniform(0.8, 0.97), rng.uniform(0.9, 0.99), rng.uniform(0.6, 0.95)
    lunch0, batch0 = rng.uniform(0.2, 0.4), rng.uniform(0.05, 0.3)
    ride0, dist0 = rng.uniform(15.0, 35.0), rng.uniform(1.5, 4.5)
    amp = cfg.seasonality * rng.uniform(0.5, 1.5)
    phase = rng.uniform(0.0, 7.0)

    churn = None
    if role != "retain":
        lo, hi = cfg.churn_range
        churn = int(rng.integers(lo, hi + 1))

    onboard = None
    if noisy and rng.random() < cfg.late_join_fraction:
        latest = G // 2 if churn is None else max(1, churn - P - 28)
        onboard = int(rng.integers(1, max(2, latest)))

    # day index t runs over [t0, G); array position is t - t0
    t0 = -BURN_IN if onboard is None else onboard
    t = np.arange(t0, G)
    n = len(t)
    week = 1.0 + amp * np.sin(2 * np.pi * (t + phase) / 7)
    mult = week.copy()
    decay = np.zeros(n)                              # 0 normal, rising to 1 at the end of a decline

    if onboard is not None:
        mult *= np.clip(0.3 + 0.7 * (t - onboard) / 14, 0.3, 1.0)

    active = np.ones(n, dtype=bool)
    forced = []
    if noisy:
        active &= rng.random(n) >= cfg.idle_prob
        n_vac = rng.poisson(cfg.vacation_rate * G / 100)
        for _ in range(n_vac):
            length = int(rng.integers(7, cfg.max_vacation + 1))
            start = int(rng.integers(0, G))
            back = int(rng.integers(5, 15))          # gradual return after the break
            active[(t >= start) & (t < start + length)] = False
            x = t - (start + length)
            mult *= np.where((x >= 0) & (x < back), 0.3 + 0.7 * x / back, 1.0)
        if role == "retain":
            for _ in range(rng.poisson(cfg.slump_rate * G / 100)):
                start = int(rng.integers(0, G))
                down, hold, up = int(rng.integers(10, P + 1)), int(rng.integers(0, 6)), int(rng.integers(5, 11))
                depth = rng.uniform(0.4, 1.0 - cfg.ramp_floor)
                x = t - start
                shape = np.where(x < 0, 0.0,
                         np.where(x < down, (x + 1) / down,
                         np.where(x < down + hold, 1.0,
                         np.where(x < down + hold + up, 1.0 - (x - down - hold + 1) / up, 0.0))))
                mult *= 1.0 - depth * shape
                decay = np.maximum(decay, shape * depth / (1.0 - cfg.ramp_floor))

    if churn is not None:
        if role == "soft":
            pre = (t >= churn - P) & (t < churn)
            prog = (t[pre] - (churn - P)) / (P - 1)
            mult[pre] = 1.0 - (1.0 - cfg.ramp_floor) * prog   # weekly rhythm gives way to the ramp
            decay[pre] = prog
            if noisy:
                idle_p = cfg.idle_prob + (0.6 - cfg.idle_prob) * prog
                active[pre] = rng.random(pre.sum()) >= idle_p
        active[t >= churn] = False
        active[t == churn - 1] = True                       # last active day
        last_day = churn - 1
    else:
        last_day = G - 1
    if noisy:
        _cap_gaps(active, 0, last_day - t0, forced)

    def jitter(scale, size=n):
        return 1.0 + s * scale * rng.standard_normal(size) if noisy else np.ones(size)

    trips = np.where(active, np.round(np.maximum(0.0, base * mult * jitter(0.25))), 0.0)
    acc = np.where(active, np.clip(acc0 * (1 - 0.35 * decay) * jitter(0.04), 0.01, 1.0), 0.0)
    comp = np.where(active, np.clip(comp0 * (1 - 0.2 * decay) * jitter(0.03), 0.01, 1.0), 0.0)
    login = np.where(active, np.clip(login0 * (1 - 0.5 * decay) * jitter(0.08), 0.01, 1.0), 0.0)
    earn = trips * pay * np.maximum(0.0, jitter(0.1))
    lunch = np.round(trips * np.clip(lunch0 * jitter(0.2), 0.0, 1.0))
    batch = np.round(trips * np.clip(batch0 * jitter(0.3), 0.0, 1.0))
    working = trips > 0
    ride = np.where(working, ride0 * np.maximum(0.0, jitter(0.15)), 0.0)
    dist = np.where(working, dist0 * np.maximum(0.0, jitter(0.15)), 0.0)
    assigns = np.where(active, np.round(trips / np.maximum(comp, 0.01)), 0.0)
    b2v = rng.gamma(4.0, 0.6, n) if noisy else np.full(n, 2.4)

    feats = np.zeros((n, len(FEATURES)))
    s7, e7 = _trailing_sum(trips, 7), _trailing_sum(earn, 7)
    have7 = np.minimum(np.arange(1, n + 1), 7)
    feats[:, F["avg_orders_7d"]] = s7 / have7
    feats[:, F["avg_earnings_7d"]] = e7 / have7
    prev7 = np.concatenate([np.zeros(7), s7[:-7]]) if n > 7 else np.zeros(n)
    feats[:, F["delta_orders"]] = s7 - prev7
    feats[:, F["acceptance_rate"]] = acc
    feats[:, F["activity_score"]] = (login + acc + comp) / 3
    feats[:, F["b2v_distance"]] = b2v
    feats[:, F["lunch_trips"]] = lunch
    feats[:, F["assigns"]] = assigns
    feats[:, F["avg_ride_time"]] = ride
    feats[:, F["batch_trips"]] = batch
    feats[:, F["avg_dist_per_delivery"]] = dist
    # lifetime aggregates: history before the observed span plus everything since
    if onboard is None:
        prior_days = rng.uniform(60.0, 1000.0) * (1.0 - (cfg.idle_prob if noisy else 0.0))
    else:
        prior_days = 0.0
    days = prior_days + np.cumsum(active)
    trips_total = prior_days * base + np.cumsum(trips)
    ltv = prior_days * base * pay + np.cumsum(earn)
    with np.errstate(invalid="ignore", divide="ignore"):
        feats[:, F["avg_daily_trips"]] = np.where(days > 0, trips_total / days, 0.0)
        feats[:, F["avg_daily_income"]] = np.where(days > 0, ltv / days, 0.0)
    feats[:, F["ltv"]] = ltv

    keep = t >= 0
    d0 = np.datetime64(cfg.start_date, "D")
    dates = d0 + t[keep]
    tl = CourierTimeline(courier_id(i), dates, feats[keep], dates[active[keep]])
    if latent:
        return tl, churn, {"trips": trips[keep], "earnings": earn[keep]}
    return tl, churn


def _job(args):
    i, cfg, role = args
    return simulate_courier(i, cfg, role)


def generate_cohort(config: CohortConfig, workers: int = 1) -> Cohort:
    roles = _roles(config)
    jobs = [(i, config, roles[i]) for i in range(config.n_couriers)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, jobs, chunksize=32))
    else:
        results = [_job(j) for j in jobs]
    d0 = np.datetime64(config.start_date, "D")
    timelines = [tl for tl, _ in results]
    churn = {tl.courier_id: (None if c is None else d0 + c) for tl, c in results}
    return Cohort(config, timelines, churn)


def ground_truth_label(churn_date, reference_date) -> int:
    """Label implied by the generator: positive from the last active day onward."""
    if churn_date is None:
        return 0
    return int(np.datetime64(reference_date, "D") >= churn_date - 1)


def write_ground_truth(path, cohort: Cohort) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["courier_id", "churn_date"])
        for tl in cohort.timelines:
            c = cohort.churn_dates[tl.courier_id]
            w.writerow([tl.courier_id, "" if c is None else str(c)])


def read_ground_truth(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        return {r["courier_id"]: (np.datetime64(r["churn_date"], "D") if r["churn_date"] else None)
                for r in csv.DictReader(fh)}


def config_dict(cfg: CohortConfig) -> dict:
    return asdict(cfg)
