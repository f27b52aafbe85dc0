import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radarseq.domain import (
    FEATURES, N_FEATURES, CourierTimeline, DataError, FeatureSchema, NormStats,
    assign_label, fit_norm_stats, make_splits, normalize, read_events_csv, write_events_csv,
)

from oracles import interval_scan

D0 = np.datetime64("2024-01-01")


def timeline(cid="c", n=10, active=None, feats=None, start=D0):
    dates = start + np.arange(n)
    feats = np.ones((n, N_FEATURES)) if feats is None else feats
    return CourierTimeline(cid, dates, feats, dates if active is None else active)


def test_schema_order_and_size():
    s = FeatureSchema()
    assert s.d == 14 and s.names[0] == "avg_orders_7d" and s.names[-1] == "avg_daily_income"
    assert "acceptance_rate" in s.names and "ltv" in s.names
    with pytest.raises(DataError):
        FeatureSchema(names=FEATURES[::-1])


def test_timeline_rejects_bad_rows():
    with pytest.raises(DataError):
        timeline(feats=np.full((10, N_FEATURES), np.nan))
    dates = D0 + np.array([0, 2, 1])
    with pytest.raises(DataError):
        CourierTimeline("x", dates, np.zeros((3, N_FEATURES)), dates)


def test_dense_fills_missing_days_with_zeros():
    dates = D0 + np.array([0, 3])
    tl = CourierTimeline("x", dates, np.full((2, N_FEATURES), 2.0), dates)
    f, has = tl.dense(D0, D0 + 4)
    assert f.shape == (5, 14)
    assert has.tolist() == [True, False, False, True, False]
    assert f[1].sum() == 0 and f[3, 0] == 2.0


# --- norm stats

def test_single_day_all_degenerate():
    st_ = fit_norm_stats([timeline(n=1, feats=np.full((1, 14), 3.0))])
    assert np.all(st_.mins == 3.0) and np.all(st_.maxs == 3.0) and st_.degenerate.all()
    assert np.all(normalize(np.arange(14.0), st_) == 0.5)


def test_two_days_min_max():
    f = np.zeros((2, 14))
    f[1, 4] = 10
    s = fit_norm_stats([timeline(n=2, feats=f)])
    assert (s.mins[4], s.maxs[4]) == (0, 10)
    x = np.zeros(14)
    x[4] = 10
    assert normalize(x, s)[4] == 1.0
    assert normalize(np.zeros(14), s)[4] == 0.0
    x[4] = 99
    assert normalize(x, s)[4] == 1.0  # clamped


def test_norm_stats_brute_force_scan():
    rng = np.random.default_rng(3)
    tls = [timeline(f"c{i}", n=int(rng.integers(1, 30)), feats=None) for i in range(100)]
    tls = [CourierTimeline(t.courier_id, t.dates, rng.normal(size=(len(t), 14)) * 5, t.dates) for t in tls]
    s = fit_norm_stats(tls)
    for k in range(14):
        cells = [row[k] for t in tls for row in t.features]
        assert s.mins[k] == min(cells) and s.maxs[k] == max(cells)


def test_no_training_data():
    with pytest.raises(DataError, match="no training data"):
        fit_norm_stats([])


def test_norm_stats_csv_roundtrip(tmp_path):
    s = NormStats(np.arange(14.0) / 3, np.arange(14.0) + 1.1)
    s.to_csv(tmp_path / "n.csv")
    assert (tmp_path / "n.csv").read_text().splitlines()[0] == "feature,min,max"
    back = NormStats.from_csv(tmp_path / "n.csv")
    assert np.array_equal(back.mins, s.mins) and np.array_equal(back.maxs, s.maxs)
    assert back.fitted_on == "train"


# --- labels

def test_label_boundary_44_and_45():
    active = D0 + np.array([0, 44])
    tl = CourierTimeline("x", D0 + np.arange(100), np.zeros((100, 14)), active)
    assert assign_label(tl, D0).value == 0
    tl = CourierTimeline("x", D0 + np.arange(100), np.zeros((100, 14)), D0 + np.array([0, 46]))
    assert assign_label(tl, D0).value == 1
    tl = CourierTimeline("x", D0 + np.arange(100), np.zeros((100, 14)), D0 + np.array([0, 45]))
    assert assign_label(tl, D0).value == 0


def test_label_before_timeline_start():
    with pytest.raises(DataError):
        assign_label(timeline(), D0 - 1)


def test_label_censoring():
    tl = timeline(n=60)
    assert assign_label(tl, D0 + 15, dataset_end=D0 + 59).censored
    assert not assign_label(tl, D0 + 14, dataset_end=D0 + 59).censored


def test_label_matches_interval_scan_random():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(1, 150))
        offs = np.flatnonzero(rng.random(n) < rng.random())
        tl = CourierTimeline("x", D0 + np.arange(n), np.zeros((n, 14)), D0 + offs)
        ref = int(rng.integers(0, n))
        assert assign_label(tl, D0 + ref).value == interval_scan(set(offs.tolist()), ref)


@settings(max_examples=200, deadline=None)
@given(st.sets(st.integers(0, 120), max_size=40), st.integers(0, 60), st.integers(0, 120))
def test_label_monotone_in_activity(active, ref, extra):
    dates = D0 + np.arange(121)
    tl = CourierTimeline("x", dates, np.zeros((121, 14)), D0 + np.array(sorted(active), dtype=int))
    before = assign_label(tl, D0 + ref).value
    tl2 = CourierTimeline("x", dates, np.zeros((121, 14)), D0 + np.array(sorted(active | {extra}), dtype=int))
    after = assign_label(tl2, D0 + ref).value
    assert after <= before


# --- splits

def test_split_exact_proportions():
    assert make_splits([f"c{i}" for i in range(10)], 0).counts() == {"train": 8, "val": 1, "test": 1}
    ids = [f"courier-{i:05d}" for i in range(16000)]
    assert make_splits(ids, 42).counts() == {"train": 12800, "val": 1600, "test": 1600}


def test_split_determinism_and_order_independence():
    ids = [f"u{i}" for i in range(237)]
    a = make_splits(ids, 5)
    assert a.mapping == make_splits(ids, 5).mapping
    shuffled = list(np.random.default_rng(0).permutation(ids))
    assert a.mapping == make_splits(shuffled, 5).mapping
    assert a.mapping != make_splits(ids, 6).mapping


@settings(max_examples=50, deadline=None)
@given(st.integers(10, 400), st.integers(0, 2**31))
def test_split_proportions_within_one(n, seed):
    c = make_splits([str(i) for i in range(n)], seed).counts()
    assert sum(c.values()) == n
    for k, frac in zip(("train", "val", "test"), (0.8, 0.1, 0.1)):
        assert abs(c[k] - frac * n) <= 1


def test_split_errors():
    with pytest.raises(DataError, match="too few users to split"):
        make_splits(list("abcdefghi"), 0)
    with pytest.raises(DataError):
        make_splits(["a"] * 12, 0)


def test_leakage_guard_sentinel():
    ids = [f"c{i}" for i in range(20)]
    sp = make_splits(ids, 1)
    tls = []
    for cid in ids:
        f = np.ones((3, 14))
        if sp[cid] != "train":
            f[:] = 1e9  # sentinel that must never reach the stats
        tls.append(timeline(cid, n=3, feats=f))
    s = fit_norm_stats([t for t in tls if sp[t.courier_id] == "train"])
    assert s.fitted_on == "train" and s.maxs.max() < 1e9


# --- events CSV

def test_events_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    f = rng.random((5, 14))
    f[2, FEATURES.index("activity_score")] = 0.0
    tl = timeline("a", n=5, feats=f)
    write_events_csv(tmp_path / "e.csv", [tl])
    text = (tmp_path / "e.csv").read_text().splitlines()
    assert text[0] == "courier_id,date," + ",".join(FEATURES)
    assert text[1].startswith("a,2024-01-01,")
    (back,) = read_events_csv(tmp_path / "e.csv")
    np.testing.assert_allclose(back.features, f, rtol=1e-9)
    assert len(back.active) == 4 and D0 + 2 not in back.active


def test_events_bad_header(tmp_path):
    (tmp_path / "e.csv").write_text("id,day\n")
    with pytest.raises(DataError):
        read_events_csv(tmp_path / "e.csv")
