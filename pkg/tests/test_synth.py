import numpy as np
import pytest

from radarseq.domain import FEATURES, assign_label, write_events_csv
from radarseq.synth import (
    CohortConfig, generate_cohort, ground_truth_label, read_ground_truth, simulate_courier,
    write_ground_truth,
)

F = {n: k for k, n in enumerate(FEATURES)}


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(CohortConfig(n_couriers=120, seed=3))


def test_config_validation():
    with pytest.raises(ValueError):
        CohortConfig(n_couriers=0)
    with pytest.raises(ValueError):
        CohortConfig(precursor_days=200)
    with pytest.raises(ValueError):
        CohortConfig(noise_scale=-1)
    with pytest.raises(ValueError):
        CohortConfig(horizon_days=60)
    c = CohortConfig(n_couriers=7)
    assert 1 <= c.n_churners <= 6


def test_seed_determinism(tmp_path):
    cfg = CohortConfig(n_couriers=40, seed=11)
    paths = []
    for k in range(2):
        c = generate_cohort(cfg)
        p = tmp_path / f"e{k}.csv"
        write_events_csv(p, c.timelines)
        write_ground_truth(tmp_path / f"g{k}.csv", c)
        paths.append(p)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert (tmp_path / "g0.csv").read_bytes() == (tmp_path / "g1.csv").read_bytes()
    assert generate_cohort(CohortConfig(n_couriers=40, seed=12)).timelines[0].features.sum() != \
        generate_cohort(cfg).timelines[0].features.sum()


def test_parallel_equals_serial():
    cfg = CohortConfig(n_couriers=60, seed=5)
    a, b = generate_cohort(cfg), generate_cohort(cfg, workers=2)
    assert a.churn_dates == b.churn_dates
    for x, y in zip(a.timelines, b.timelines):
        assert np.array_equal(x.features, y.features) and np.array_equal(x.active, y.active)


def test_ground_truth_csv(tmp_path, cohort):
    write_ground_truth(tmp_path / "g.csv", cohort)
    lines = (tmp_path / "g.csv").read_text().splitlines()
    assert lines[0] == "courier_id,churn_date"
    assert read_ground_truth(tmp_path / "g.csv") == cohort.churn_dates
    assert sum(v is not None for v in cohort.churn_dates.values()) == cohort.config.n_churners
    none = generate_cohort(CohortConfig(n_couriers=30, churn_fraction=0.0))
    assert all(v is None for v in none.churn_dates.values())


def test_noiseless_retainers_are_periodic_and_unlabelled():
    c = generate_cohort(CohortConfig(n_couriers=12, churn_fraction=0.0, noise_scale=0.0, seed=2))
    for tl in c.timelines:
        f = tl.features.copy()
        assert len(tl) == c.config.horizon_days
        # ltv is a running total: its daily increments are what repeat
        ltv = f[:, F["ltv"]]
        assert np.all(np.diff(ltv) >= 0)
        f[1:, F["ltv"]] = np.diff(ltv)
        # lifetime per-active-day means drift towards the weekly mean; they only stay in range
        for name in ("avg_daily_trips", "avg_daily_income"):
            col = f[:, F[name]]
            assert np.all(col > 0) and np.ptp(col) < 0.2 * col.mean()
            f[:, F[name]] = 0.0
        f = f[1:]
        np.testing.assert_allclose(f[7:], f[:-7], rtol=1e-9, atol=1e-6)
        for e in tl.dates[: len(tl) - 45]:
            assert assign_label(tl, e).value == 0
        # no drift: whole-week means agree across the horizon
        weeks = f[: len(f) - len(f) % 7].reshape(-1, 7, f.shape[1]).mean(axis=1)
        np.testing.assert_allclose(weeks[0], weeks[-1], rtol=1e-9, atol=1e-6)


def test_noiseless_soft_churner_ramp_is_non_increasing():
    cfg = CohortConfig(n_couriers=10, noise_scale=0.0, seed=4)
    tl, churn, lat = simulate_courier(0, cfg, "soft", latent=True)
    trips = lat["trips"]
    ramp = trips[churn - cfg.precursor_days:churn]
    assert np.all(np.diff(ramp) <= 0) and ramp[0] > ramp[-1] > 0
    assert np.all(trips[churn:] == 0)
    assert tl.active[-1] == np.datetime64(cfg.start_date) + churn - 1


def test_generator_labeler_consistency(cohort):
    end = cohort.end_date
    for tl in cohort.timelines:
        cd = cohort.churn_dates[tl.courier_id]
        for e in tl.dates:
            if e + 45 > end:
                break
            assert assign_label(tl, e).value == ground_truth_label(cd, e)
        if cd is not None:
            assert assign_label(tl, cd - 1).value == 1
            early = cd - 46
            if early >= tl.first_date:
                assert assign_label(tl, early).value == 0


def test_features_consistent(cohort):
    for tl in cohort.timelines[:30]:
        f = tl.features
        assert np.all(f[:, [k for k in range(14) if k != F["delta_orders"]]] >= 0)
        assert np.all(f[:, F["acceptance_rate"]] <= 1) and np.all(f[:, F["activity_score"]] <= 1)
        act = np.isin(tl.dates, tl.active)
        assert np.all(f[act, F["activity_score"]] > 0) and np.all(f[~act, F["activity_score"]] == 0)
        ok = f[:, F["avg_daily_trips"]] > 0
        pay = f[ok, F["avg_daily_income"]] / f[ok, F["avg_daily_trips"]]
        assert pay.min() > 2.5 and pay.max() < 8.0   # per-trip pay band


def test_null_feature_is_independent_of_churn(cohort):
    churner = np.array([cohort.churn_dates[t.courier_id] is not None for t in cohort.timelines])
    means = np.array([t.features[:, F["b2v_distance"]].mean() for t in cohort.timelines])
    diff = means[churner].mean() - means[~churner].mean()
    se = np.sqrt(means[churner].var() / churner.sum() + means[~churner].var() / (~churner).sum())
    assert abs(diff) < 3 * se
