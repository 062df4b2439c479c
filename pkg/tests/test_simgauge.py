import numpy as np
import pytest

from conftest import random_orthogonal
from fmfusion import errors
from fmfusion.simgauge import (
    MetricConfig,
    knn_indices,
    knn_jaccard,
    linear_cka,
    procrustes_distance,
    ridge_cross_r2,
    similarity_report,
    svcca,
)
from fmfusion.store import EmbeddingMatrix


def gram_cka(x, y):
    """Oracle: HSIC on explicitly centered N x N linear kernels."""
    n = x.shape[0]
    h = np.eye(n) - np.ones((n, n)) / n
    k, l = h @ x @ x.T @ h, h @ y @ y.T @ h
    return np.trace(k @ l) / np.sqrt(np.trace(k @ k) * np.trace(l @ l))


@pytest.fixture
def xy(rng):
    x = rng.normal(size=(120, 12))
    y = x[:, :6] @ rng.normal(size=(6, 9)) + 0.7 * rng.normal(size=(120, 9))
    return x, y


def test_cka_matches_gram_oracle(xy):
    x, y = xy
    assert abs(linear_cka(x, y) - gram_cka(x, y)) < 1e-12


def test_cka_gram_branch_when_features_exceed_samples(rng):
    x, y = rng.normal(size=(20, 50)), rng.normal(size=(20, 40))
    assert abs(linear_cka(x, y) - gram_cka(x, y)) < 1e-12


def test_cka_self_and_invariance(xy):
    x, y = xy
    assert linear_cka(x, x) == pytest.approx(1.0, abs=1e-12)
    q = random_orthogonal(12, 3)
    assert linear_cka(x, x @ q * 3.7) == pytest.approx(1.0, abs=1e-10)
    qy = random_orthogonal(9, 4)
    assert abs(linear_cka(x, y @ qy * 0.2) - linear_cka(x, y)) < 1e-8


def test_cka_symmetry(xy):
    x, y = xy
    assert abs(linear_cka(x, y) - linear_cka(y, x)) < 1e-12


def test_cka_errors(rng):
    with pytest.raises(errors.SampleCountMismatch):
        linear_cka(rng.normal(size=(5, 2)), rng.normal(size=(6, 2)))
    with pytest.raises(errors.DegenerateInput):
        linear_cka(np.ones((5, 2)), rng.normal(size=(5, 2)))


def test_svcca_rotation(xy):
    x, _ = xy
    assert svcca(x, x @ random_orthogonal(12, 8)) == pytest.approx(1.0, abs=1e-6)


def test_svcca_matches_direct_cca(rng):
    # With frac=1 every direction is kept, so SVCCA reduces to plain CCA.
    x, y = rng.normal(size=(300, 4)), rng.normal(size=(300, 3))
    y[:, 0] += x[:, 0]
    xc, yc = x - x.mean(0), y - y.mean(0)
    wx = np.linalg.inv(np.linalg.cholesky(xc.T @ xc)).T
    wy = np.linalg.inv(np.linalg.cholesky(yc.T @ yc)).T
    rho = np.linalg.svd((xc @ wx).T @ (yc @ wy), compute_uv=False)
    assert svcca(x, y, MetricConfig(svcca_variance_fraction=1.0)) == pytest.approx(rho.mean(), abs=1e-7)


def test_svcca_independent_inside_permutation_null(rng):
    n, d = 5000, 50
    x, y = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    null = np.array([svcca(x, y[rng.permutation(n)]) for _ in range(100)])
    score = svcca(x, y)
    assert abs(score - null.mean()) <= 3 * null.std()


def test_svcca_rank_collapse():
    with pytest.raises(errors.RankCollapse):
        svcca(np.ones((10, 3)), np.random.default_rng(0).normal(size=(10, 3)))


def rotation_grid_distance(a, b, steps=20000):
    """Oracle: min over a dense grid of 2-D rotations and reflections."""
    a = a - a.mean(0)
    b = b - b.mean(0)
    a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
    best = np.inf
    for t in np.linspace(0, 2 * np.pi, steps, endpoint=False):
        c, s = np.cos(t), np.sin(t)
        for r in (np.array([[c, -s], [s, c]]), np.array([[c, s], [s, -c]])):
            best = min(best, np.linalg.norm(a @ r - b))
    return best


def test_procrustes_against_rotation_grid(rng):
    a = rng.normal(size=(40, 2)) * [3.0, 1.0]
    b = a @ np.array([[0.6, -0.8], [0.8, 0.6]]) + 0.3 * rng.normal(size=(40, 2))
    assert procrustes_distance(a, b) == pytest.approx(rotation_grid_distance(a, b), abs=1e-6)


def test_procrustes_negation_and_rotation(rng):
    a = rng.normal(size=(50, 2))
    assert procrustes_distance(a, -a) < 1e-7
    assert rotation_grid_distance(a, -a) < 1e-6
    x = rng.normal(size=(200, 16))
    assert procrustes_distance(x, x @ random_orthogonal(16, 2)) < 1e-6


def test_procrustes_bounded_and_noise_monotone(rng):
    x = rng.normal(size=(300, 10))
    medians = []
    for scale in (0.1, 0.5, 2.0):
        vals = [procrustes_distance(x, x + scale * np.random.default_rng(s).normal(size=x.shape)) for s in range(20)]
        medians.append(np.median(vals))
    assert medians == sorted(medians)
    assert procrustes_distance(x, rng.normal(size=(300, 10))) <= np.sqrt(2)


def brute_knn(x, k):
    d = np.linalg.norm(x[:, None] - x[None], axis=2)
    np.fill_diagonal(d, np.inf)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def test_knn_indices_match_brute_force(rng):
    x = rng.normal(size=(150, 5))
    np.testing.assert_array_equal(knn_indices(x, 7, block=32), brute_knn(x, 7))


def test_knn_ties_go_to_lower_index():
    x = np.array([[0.0], [1.0], [-1.0], [2.0], [-2.0]])
    assert knn_indices(x, 2)[0].tolist() == [1, 2]
    assert knn_indices(x, 1)[0].tolist() == [1]


def test_knn_jaccard_identity_and_isometry(rng):
    x = rng.normal(size=(200, 6))
    assert knn_jaccard(x, x) == 1.0
    assert knn_jaccard(x, x @ random_orthogonal(6, 1) * 2.5 + 4.0) == 1.0
    assert 0.0 <= knn_jaccard(x, rng.normal(size=(200, 6))) < 0.5
    with pytest.raises(errors.KTooLarge):
        knn_jaccard(x[:10], x[:10])


def test_knn_jaccard_hand_example():
    # In 1-D, 2-NN of the ends differ between x and its reversal-scrambled copy.
    x = np.arange(6.0)[:, None]
    y = np.array([0.0, 1.0, 2.0, 10.0, 11.0, 12.0])[:, None]
    # per-sample sets with k=2 computed by hand
    sets_x = [{1, 2}, {0, 2}, {1, 3}, {2, 4}, {3, 5}, {3, 4}]
    sets_y = [{1, 2}, {0, 2}, {0, 1}, {4, 5}, {3, 5}, {3, 4}]
    expect = np.mean([len(a & b) / len(a | b) for a, b in zip(sets_x, sets_y)])
    assert knn_jaccard(x, y, MetricConfig(knn_k=2)) == pytest.approx(expect)


def ridge_oracle(x, y, lam):
    """Ridge via augmented least squares on standardized data."""
    xs = (x - x.mean(0)) / x.std(0)
    ys = (y - y.mean(0)) / y.std(0)
    a = np.vstack([xs, np.sqrt(lam) * np.eye(xs.shape[1])])
    b = np.vstack([ys, np.zeros((xs.shape[1], ys.shape[1]))])
    coef = np.linalg.lstsq(a, b, rcond=None)[0]
    return 1 - np.sum((ys - xs @ coef) ** 2) / np.sum(ys ** 2)


def test_ridge_matches_oracle(xy):
    x, y = xy
    r_xy, r_yx = ridge_cross_r2(x, y, MetricConfig(ridge_lambda=2.0))
    assert r_xy == pytest.approx(ridge_oracle(x, y, 2.0), abs=1e-10)
    assert r_yx == pytest.approx(ridge_oracle(y, x, 2.0), abs=1e-10)


def test_ridge_identity_and_linear_image(rng):
    x = rng.normal(size=(100, 5))
    cfg = MetricConfig(ridge_lambda=1e-8)
    r1, r2 = ridge_cross_r2(x, x, cfg)
    assert abs(r1 - 1) < 1e-6 and abs(r2 - 1) < 1e-6
    r_xy, _ = ridge_cross_r2(x, x @ rng.normal(size=(5, 3)), cfg)
    assert abs(r_xy - 1) < 1e-6


def test_ridge_dual_branch(rng):
    x, y = rng.normal(size=(15, 40)), rng.normal(size=(15, 3))
    r_xy, _ = ridge_cross_r2(x, y, MetricConfig(ridge_lambda=0.5))
    assert r_xy == pytest.approx(ridge_oracle(x, y, 0.5), abs=1e-9)


def test_ridge_decreasing_in_lambda(xy):
    x, y = xy
    r = [ridge_cross_r2(x, y, MetricConfig(ridge_lambda=lam))[0] for lam in (1e-3, 0.1, 1, 10, 100)]
    assert all(a >= b for a, b in zip(r, r[1:]))


def test_ridge_rejects_nonpositive_lambda():
    with pytest.raises(errors.SingularSystem):
        MetricConfig(ridge_lambda=0.0)


def test_similarity_report_rows(rng):
    base = rng.normal(size=(80, 6))
    encs = {k: EmbeddingMatrix(k, [str(i) for i in range(80)], base + s * rng.normal(size=base.shape))
            for k, s in (("c", 1.0), ("a", 0.5), ("b", 2.0))}
    rep = similarity_report(encs)
    assert len(rep) == 3
    assert [(r["encoder_a"], r["encoder_b"]) for r in rep.rows] == [("a", "b"), ("a", "c"), ("b", "c")]
    encs.update({k: encs["a"] for k in ("d", "e")})
    rep = similarity_report(encs)
    assert len(rep) == 10
    same = [r for r in rep.rows if (r["encoder_a"], r["encoder_b"]) == ("a", "d")][0]
    assert same["cka"] == pytest.approx(1.0) and same["knn_jaccard"] == 1.0 and same["procrustes"] < 1e-6
    assert rep.to_csv().splitlines()[0] == "encoder_a,encoder_b,cka,svcca,procrustes,knn_jaccard,r2_ab,r2_ba"
