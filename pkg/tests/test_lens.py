import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_orthogonal
from fmfusion import errors
from fmfusion.lens import (
    COVERAGE_PERCENTILES,
    AttentionMap,
    RegionMask,
    clustering_bootstrap,
    comparison_report,
    compactness,
    coverage_curve,
    dice,
    dice_flagged,
    load_attention_csv,
    load_regions_csv,
    pairwise_dice,
    percentile_mask,
    region_coverage,
    silhouette,
    write_attention_csv,
)
from fmfusion.store import grid_coords
from fmfusion.tsne import conditional_p, tsne, _sq_dists


def amap(values, sid="s"):
    return AttentionMap(sid, grid_coords(len(values)), values)


def test_uniform_attention_masks_nothing():
    assert not percentile_mask(amap(np.full(10, 0.3)), 50).any()


def test_p90_on_distinct_values_selects_ten(rng):
    assert percentile_mask(amap(rng.permutation(100) / 100.0), 90).sum() == 10


def test_masks_nested_over_grid(rng):
    a = amap(rng.random(137))
    masks = [percentile_mask(a, p) for p in COVERAGE_PERCENTILES]
    for lo, hi in zip(masks, masks[1:]):
        assert not (hi & ~lo).any()


def test_mask_errors():
    with pytest.raises(errors.EmptyMap):
        percentile_mask(np.array([]), 50)
    with pytest.raises(errors.DataError):
        percentile_mask(amap([1.0, 2.0]), 100)


def test_attention_map_validation():
    with pytest.raises(errors.DataError):
        AttentionMap("s", [[0, 0], [0, 0]], [1.0, 2.0])
    with pytest.raises(errors.DataError):
        AttentionMap("s", [[0, 0]], [-1.0])
    with pytest.raises(errors.LengthMismatch):
        AttentionMap("s", [[0, 0]], [1.0, 2.0])


def test_dice_basics():
    m = np.array([1, 0, 1, 1], bool)
    assert dice(m, m) == 1.0
    assert dice(m, ~m) == 0.0
    assert dice([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
    assert dice_flagged(np.zeros(3, bool), np.zeros(3, bool)) == (1.0, True)
    with pytest.raises(errors.LengthMismatch):
        dice([1, 0], [1, 0, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=40))
def test_dice_symmetric_bounded(pairs):
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    assert dice(a, b) == dice(b, a)
    assert 0.0 <= dice(a, b) <= 1.0


def test_pairwise_dice_report(rng):
    v = rng.random(50)
    maps = {"b": amap(v, "b"), "a": amap(v, "a"), "c": amap(rng.random(50), "c")}
    rep = pairwise_dice(maps)
    assert len(rep) == 9
    same = [r for r in rep.rows if (r["map_a"], r["map_b"]) == ("a", "b")]
    assert all(r["dice"] == 1.0 for r in same)
    with pytest.raises(errors.AlignmentMismatch):
        pairwise_dice({"a": amap(v), "z": AttentionMap("z", grid_coords(50)[::-1], v)})


def test_coverage_on_tumor_attention():
    regions = np.array(["tumor"] * 30 + ["benign"] * 50 + ["background"] * 20, dtype=object)
    values = np.where(regions == "tumor", 1.0, 0.0)
    a = amap(values)
    cov = region_coverage(a, RegionMask(a.coords, regions), 25)
    assert cov == {"tumor": 1.0, "benign": 0.0}


def test_coverage_excludes_background_and_handles_missing_region(rng):
    a = amap(rng.random(40))
    regions = np.array(["tumor"] * 20 + ["background"] * 20, dtype=object)
    cov = region_coverage(a, RegionMask(a.coords, regions), 50)
    assert cov["benign"] is None
    att = percentile_mask(a, 50)
    assert cov["tumor"] == att[:20].mean()


def test_coverage_curve_non_increasing(rng):
    a = amap(rng.random(200))
    regions = rng.choice(["tumor", "benign", "background"], 200).astype(object)
    rep = coverage_curve(a, RegionMask(a.coords, regions))
    for reg in ("tumor", "benign"):
        vals = rep.column(reg)
        assert all(x >= y for x, y in zip(vals, vals[1:]))
        assert all(0 <= x <= 1 for x in vals)


def test_region_alignment_by_coordinates(rng):
    a = amap(rng.random(9))
    regions = np.array(["tumor"] * 4 + ["benign"] * 5, dtype=object)
    shuffled = rng.permutation(9)
    r = RegionMask(a.coords[shuffled], regions[shuffled])
    np.testing.assert_array_equal(r.aligned_to(a), regions)
    with pytest.raises(errors.AlignmentMismatch):
        RegionMask(a.coords[:5], regions[:5]).aligned_to(a)


def test_csv_round_trip(tmp_path, rng):
    a = amap(rng.random(12), "slideX")
    write_attention_csv(a, tmp_path / "slideX.csv")
    b = load_attention_csv(tmp_path / "slideX.csv")
    assert b.slide_id == "slideX"
    np.testing.assert_array_equal(b.values, a.values)
    np.testing.assert_array_equal(b.coords, a.coords)
    (tmp_path / "r.csv").write_text("row,col,region\n0,0,tumor\n0,1,stroma\n")
    with pytest.raises(errors.DataError):
        load_regions_csv(tmp_path / "r.csv")


def test_silhouette_matches_sklearn(rng):
    sk = pytest.importorskip("sklearn.metrics")
    x = np.vstack([rng.normal(size=(60, 5)), rng.normal(1.0, 1.0, size=(40, 5))])
    y = np.r_[np.zeros(60), np.ones(40)].astype(int)
    assert silhouette(x, y, block=17) == pytest.approx(sk.silhouette_score(x, y), abs=1e-12)


def test_silhouette_point_masses():
    x = np.vstack([np.zeros((5, 2)), np.full((5, 2), 10 / np.sqrt(2))])
    y = np.r_[np.zeros(5), np.ones(5)]
    assert silhouette(x + 1e-9 * np.arange(20).reshape(10, 2), y) == pytest.approx(1.0, abs=1e-8)


def test_silhouette_permutation_null():
    outside = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(300, 3))
        y = rng.integers(0, 2, 300)
        null = np.array([silhouette(x, rng.permutation(y)) for _ in range(100)])
        assert abs(null.mean()) <= 3 * null.std()
        outside += abs(silhouette(x, y) - null.mean()) > 3 * null.std()
    # a 3-sigma band should rarely exclude an unstructured labelling
    assert outside <= 2


def test_silhouette_isometry_invariant(rng):
    x = rng.normal(size=(80, 6))
    y = rng.integers(0, 2, 80)
    moved = x @ random_orthogonal(6, 5) + rng.normal(size=6) * 10
    assert abs(silhouette(moved, y) - silhouette(x, y)) < 1e-10
    assert -1.0 <= silhouette(x, y) <= 1.0


def test_silhouette_errors(rng):
    with pytest.raises(errors.SingleClass):
        silhouette(rng.normal(size=(6, 2)), np.zeros(6))


def test_compactness_zero_and_chi_median():
    assert compactness(np.ones((5, 3)), np.zeros(5)) == {0: 0.0}
    rng = np.random.default_rng(11)
    for d in (2, 10, 50):
        x = rng.normal(size=(20000, d))
        expect = np.sqrt(d * (1 - 2 / (9 * d)) ** 3)
        got = compactness(x, np.zeros(20000, int))[0]
        assert abs(got - expect) / expect < 0.02


def test_compactness_per_class(rng):
    x = np.vstack([rng.normal(size=(500, 4)), 3 * rng.normal(size=(500, 4))])
    y = np.r_[np.zeros(500, int), np.ones(500, int)]
    c = compactness(x, y)
    assert set(c) == {0, 1}
    assert c[1] == pytest.approx(3 * c[0], rel=0.1)


def test_clustering_bootstrap_contrast():
    rng = np.random.default_rng(3)
    y = np.r_[np.zeros(100, int), np.ones(100, int)]
    good = rng.normal(size=(200, 2)) + 6 * y[:, None]
    bad = rng.normal(size=(200, 2))
    res = clustering_bootstrap({"good": good, "bad": bad, "good2": good}, y, seed=1)
    by = {(r.names, r.metric): r for r in res}
    sil = by[("good", "bad"), "silhouette"]
    assert sil.tier != "ns" and sil.n_comparisons == 3
    assert by[("good", "good2"), "silhouette"].p_value == pytest.approx(1.0)
    again = clustering_bootstrap({"good": good, "bad": bad, "good2": good}, y, seed=1)
    assert all(a.values.tobytes() == b.values.tobytes() for a, b in zip(res, again))
    rep = comparison_report(res)
    assert len(rep) == 9


def test_clustering_bootstrap_alignment():
    with pytest.raises(errors.AlignmentMismatch):
        clustering_bootstrap({"a": np.zeros((5, 2)), "b": np.zeros((4, 2))}, np.zeros(5))


# ------------------------------------------------------------- t-SNE ----
def perplexity_of(row):
    row = row[row > 0]
    return np.exp(-np.sum(row * np.log(row)))


def test_conditional_perplexity_calibrated(rng):
    x = rng.normal(size=(120, 5))
    p, betas = conditional_p(_sq_dists(x), 20.0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(np.diag(p) == 0) and np.all(betas > 0)
    perp = np.array([perplexity_of(r) for r in p])
    assert np.abs(np.log(perp) - np.log(20.0)).max() < 1e-5


def two_blobs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    y = np.r_[np.zeros(n // 2, int), np.ones(n - n // 2, int)]
    return rng.normal(size=(n, 10)) + 12 * y[:, None], y


@pytest.mark.slow
def test_tsne_separates_blobs():
    x, y = two_blobs()
    res = tsne(x, seed=0)
    assert silhouette(res.embedding, y) > 0.6
    assert np.isfinite(res.kl).all()
    assert res.kl[-1] < res.kl[250]
    np.testing.assert_allclose(res.embedding.mean(axis=0), 0.0, atol=1e-10)


def test_tsne_deterministic():
    x, _ = two_blobs(90, seed=1)
    a = tsne(x, perplexity=10, iters=60, seed=3)
    b = tsne(x, perplexity=10, iters=60, seed=3)
    assert a.embedding.tobytes() == b.embedding.tobytes()
    c = tsne(x, perplexity=10, iters=60, seed=4)
    assert not np.array_equal(a.embedding, c.embedding)


def test_tsne_errors(rng):
    with pytest.raises(errors.PerplexityTooLarge):
        tsne(rng.normal(size=(30, 2)), perplexity=10)
    with pytest.raises(errors.TooManyPoints):
        tsne(np.zeros((20001, 1)))
