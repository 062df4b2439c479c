import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fmfusion import errors
from fmfusion.evalkit import (
    SplitPlan,
    auc_score,
    bootstrap_compare,
    bootstrap_indices,
    compute_metrics,
    make_splits,
    metric_value,
    significance_tier,
)


def cohort(n_pos, n_neg, prefix="P"):
    return [(f"{prefix}{i:04d}", int(i < n_pos)) for i in range(n_pos + n_neg)]


def check_plan(plan, patients, k, val_frac):
    labels = dict(patients)
    hold = set(plan.holdout)
    assert len(plan.folds) == k
    vals = []
    for train, val in plan.folds:
        t, v = set(train), set(val)
        assert not (t & v) and not (t & hold) and not (v & hold)
        assert t | v | hold == set(labels)
        vals.append(v)
        for cls in (0, 1):
            n_dev = sum(1 for p in t | v if labels[p] == cls)
            target = max(1, round(val_frac * n_dev))
            assert abs(sum(1 for p in v if labels[p] == cls) - target) <= 1
    for a in range(k):
        for b in range(a + 1, k):
            assert not (vals[a] & vals[b])


def test_holdout_stratified_arithmetic():
    pts = cohort(50, 50)
    plan = make_splits(pts, seed=1)
    lab = dict(pts)
    assert len(plan.holdout) == 10
    assert sum(lab[p] for p in plan.holdout) == 5


def test_kidney_sized_holdout():
    plan = make_splits(cohort(121, 121), seed=0)
    assert abs(len(plan.holdout) - 24) <= 1


@pytest.mark.parametrize("shape", [(50, 50), (30, 70), (8, 12), (121, 121), (200, 41)])
def test_split_invariants_many_seeds(shape):
    pts = cohort(*shape)
    for seed in range(200):
        check_plan(make_splits(pts, seed=seed), pts, 3, 0.1)


def test_split_deterministic_and_json():
    pts = cohort(20, 25)
    a, b = make_splits(pts, seed=5), make_splits(pts, seed=5)
    assert a == b
    assert SplitPlan.from_json(a.to_json()) == a
    assert make_splits(pts, seed=6) != a
    assert set(a.development) == {p for p, _ in pts} - set(a.holdout)


def test_split_too_few_patients():
    with pytest.raises(errors.TooFewPatients):
        make_splits(cohort(3, 20), k=3)


def brute_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    gt = sum(int(p > q) for p in pos for q in neg)
    eq = sum(int(p == q) for p in pos for q in neg)
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def test_auc_matches_pair_counting_exactly():
    rng = np.random.default_rng(0)
    for _ in range(300):
        n = int(rng.integers(2, 120))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        s = np.round(rng.random(n), int(rng.integers(1, 4)))
        assert auc_score(s, y) == brute_auc(s, y)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_property(pairs):
    s = np.array([p[0] for p in pairs], float) / 6
    y = np.array([p[1] for p in pairs])
    if y.min() == y.max():
        with pytest.raises(errors.SingleClassAUC):
            auc_score(s, y)
    else:
        assert auc_score(s, y) == brute_auc(s, y)


def test_metrics_perfect_and_ties():
    y = np.array([0, 1, 1, 0, 1])
    m = compute_metrics(y.astype(float), y)
    assert (m.auc, m.sensitivity, m.specificity, m.f1) == (1.0, 1.0, 1.0, 1.0)
    assert compute_metrics(np.full(4, 0.5), np.array([0, 1, 0, 1])).auc == 0.5


def test_metrics_hand_counts():
    p = np.array([0.9, 0.8, 0.3, 0.6, 0.1, 0.2])
    y = np.array([1, 1, 1, 0, 0, 0])
    m = compute_metrics(p, y)
    # TP=2 FN=1 TN=2 FP=1
    assert m.sensitivity == pytest.approx(2 / 3) and m.specificity == pytest.approx(2 / 3)
    assert m.f1 == pytest.approx(2 / 3)
    assert m.auc == pytest.approx(brute_auc(p, y))


def test_metrics_degenerate_cases():
    m = compute_metrics(np.array([0.1, 0.2, 0.3]), np.array([1, 1, 0]))
    assert m.f1 == 0.0 and m.f1_degenerate
    single = compute_metrics(np.array([0.7, 0.2]), np.array([1, 1]))
    assert single.auc is None and single.sensitivity == 0.5 and single.specificity is None
    with pytest.raises(errors.LengthMismatch):
        compute_metrics(np.zeros(3), np.zeros(2))
    with pytest.raises(errors.ConfigError):
        metric_value("accuracy", np.zeros(2), np.array([0, 1]))


def test_auc_monotone_invariance(rng):
    p = rng.random(80)
    y = rng.integers(0, 2, 80)
    assert auc_score(p, y) == auc_score(p ** 2, y) == auc_score(np.log(p), y)


def test_bootstrap_index_sets(rng):
    idx = bootstrap_indices(25, 50, 0.8, seed=3)
    assert idx.shape == (50, 20)
    for row in idx:
        assert len(set(row)) == 20 and row.max() < 25
    np.testing.assert_array_equal(idx, bootstrap_indices(25, 50, 0.8, seed=3))


def test_bootstrap_identical_models(rng):
    y = rng.integers(0, 2, 60)
    p = rng.random(60)
    res = bootstrap_compare(p, p, y, seed=2)
    assert res.values.shape == (50, 2)
    np.testing.assert_array_equal(res.values[:, 0], res.values[:, 1])
    assert res.p_value == pytest.approx(1.0)
    assert res.tier == "ns"


def test_bootstrap_paired_index_log(rng):
    y = rng.integers(0, 2, 40)
    a, b = rng.random(40), rng.random(40)
    res = bootstrap_compare(a, b, y, seed=9)
    for i, ix in enumerate(res.indices):
        assert res.values[i, 0] == auc_score(a[ix], y[ix])
        assert res.values[i, 1] == auc_score(b[ix], y[ix])


def test_bootstrap_extreme_separation():
    y = np.array([0, 1] * 30)
    res = bootstrap_compare(y.astype(float), 1.0 - y, y, seed=0, n_comparisons=10)
    assert res.values[:, 0].min() == 1.0 and res.values[:, 1].max() == 0.0
    assert res.adjusted_p < 0.05 / 10
    assert res.tier == "***"


def test_bootstrap_deterministic(rng):
    y = rng.integers(0, 2, 50)
    a, b = rng.random(50), rng.random(50)
    r1 = bootstrap_compare(a, b, y, metric="f1", seed=4)
    r2 = bootstrap_compare(a, b, y, metric="f1", seed=4)
    assert r1.values.tobytes() == r2.values.tobytes() and r1.p_value == r2.p_value


def test_bootstrap_adjusted_p_capped(rng):
    y = rng.integers(0, 2, 30)
    p = rng.random(30)
    res = bootstrap_compare(p, p, y, n_comparisons=7)
    assert res.adjusted_p == 1.0
    assert 0.0 <= res.p_value <= 1.0


def test_bootstrap_errors():
    with pytest.raises(errors.LengthMismatch):
        bootstrap_compare(np.zeros(5), np.zeros(4), np.zeros(5))
    with pytest.raises(errors.TooFewSamples):
        bootstrap_compare(np.zeros(2), np.zeros(2), np.array([0, 1]))


@pytest.mark.parametrize("p,n,tier", [(0.04, 1, "*"), (0.04, 10, "ns"), (1e-5, 5, "***"),
                                      (0.009, 1, "**"), (0.05, 1, "ns"), (0.0009, 1, "***"), (0.002, 10, "*")])
def test_significance_tiers(p, n, tier):
    assert significance_tier(p, n) == tier


def test_tier_requires_positive_n():
    with pytest.raises(errors.ConfigError):
        significance_tier(0.1, 0)
