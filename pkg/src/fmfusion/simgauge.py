"""Pairwise similarity between embedding spaces computed over the same samples.

All metrics take paired matrices (row i of both inputs is the same sample) and
accept either :class:`~fmfusion.store.EmbeddingMatrix` or plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from itertools import combinations
from typing import Mapping

import numpy as np
from scipy import linalg

from .errors import ConfigError, DegenerateInput, KTooLarge, RankCollapse, SampleCountMismatch, SingularSystem
from .report import MetricReport
from .store import as_array, standardize

REPORT_COLUMNS = ["encoder_a", "encoder_b", "cka", "svcca", "procrustes", "knn_jaccard", "r2_ab", "r2_ba"]


@dataclass(frozen=True)
class MetricConfig:
    knn_k: int = 10
    ridge_lambda: float = 1.0
    svcca_variance_fraction: float = 0.99
    procrustes_dim_cap: int = 256

    def __post_init__(self):
        if self.knn_k < 1:
            raise ConfigError("knn_k must be >= 1")
        if not self.ridge_lambda > 0:
            raise SingularSystem("ridge_lambda must be > 0")
        if not 0 < self.svcca_variance_fraction <= 1:
            raise ConfigError("svcca_variance_fraction must lie in (0, 1]")
        if self.procrustes_dim_cap < 1:
            raise ConfigError("procrustes_dim_cap must be >= 1")


@dataclass(frozen=True)
class SimilarityScores:
    cka: float
    svcca: float
    procrustes: float
    knn_jaccard: float
    r2_x_to_y: float
    r2_y_to_x: float


def _pair(x, y, min_n=1):
    x, y = as_array(x), as_array(y)
    if x.shape[0] != y.shape[0]:
        raise SampleCountMismatch(f"{x.shape[0]} vs {y.shape[0]} samples")
    if x.shape[0] < min_n:
        raise SampleCountMismatch(f"need at least {min_n} samples, got {x.shape[0]}")
    return x, y


def _center(x):
    return x - x.mean(axis=0)


def linear_cka(x, y) -> float:
    """Linear CKA in feature-space form: ||Yc'Xc||_F^2 / (||Xc'Xc||_F ||Yc'Yc||_F)."""
    x, y = _pair(x, y, 3)
    xc, yc = _center(x), _center(y)
    if not xc.any() or not yc.any():
        raise DegenerateInput("CKA undefined for a constant representation")
    n, dx, dy = xc.shape[0], xc.shape[1], yc.shape[1]
    if n < max(dx, dy):
        # Gram form is cheaper when samples are fewer than features
        kx, ky = xc @ xc.T, yc @ yc.T
        num = np.sum(kx * ky)
        den = np.linalg.norm(kx) * np.linalg.norm(ky)
    else:
        num = np.linalg.norm(yc.T @ xc) ** 2
        den = np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)
    return float(np.clip(num / den, 0.0, 1.0))


def _principal_scores(xc, frac=None, k=None):
    """Project centered data onto leading principal axes.

    Keeps ``k`` axes, or the fewest whose squared singular values reach ``frac``
    of the total. Returns ``(scores, eigenvalues)`` with scores = U_k S_k.
    """
    n, d = xc.shape
    if d <= n:
        evals, evecs = np.linalg.eigh(xc.T @ xc)
        evals, evecs = evals[::-1], evecs[:, ::-1]
        evals = np.clip(evals, 0.0, None)
        if k is None:
            k = _rank_for_fraction(evals, frac)
        # reversed eigh output is a negative-stride view; matmul only uses BLAS on a contiguous copy
        scores = xc @ np.ascontiguousarray(evecs[:, :k])
    else:
        u, s, _ = np.linalg.svd(xc, full_matrices=False)
        evals = s ** 2
        if k is None:
            k = _rank_for_fraction(evals, frac)
        scores = u[:, :k] * s[:k]
    return scores, evals[:k]


def _rank_for_fraction(evals, frac):
    total = evals.sum()
    if total <= 0:
        return 0
    cum = np.cumsum(evals) / total
    return int(np.searchsorted(cum, frac - 1e-12) + 1)


def svcca(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    """Mean canonical correlation between the leading singular subspaces of x and y."""
    x, y = _pair(x, y, 3)
    px, ex = _principal_scores(_center(x), frac=cfg.svcca_variance_fraction)
    py, ey = _principal_scores(_center(y), frac=cfg.svcca_variance_fraction)
    if px.shape[1] == 0 or py.shape[1] == 0:
        raise RankCollapse("no singular directions retained")
    # The principal scores are already decorrelated, so whitening is diagonal.
    # Ridge is 1e-8 of the mean retained variance to stay scale-free.
    ridge_x = 1e-8 * ex.mean()
    ridge_y = 1e-8 * ey.mean()
    wx = px / np.sqrt(ex + ridge_x)
    wy = py / np.sqrt(ey + ridge_y)
    rho = np.linalg.svd(wx.T @ wy, compute_uv=False)
    k = min(px.shape[1], py.shape[1])
    return float(np.clip(rho[:k], 0.0, 1.0).mean())


def procrustes_distance(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    """Residual sqrt(2 - 2 * nuclear_norm(X'Y)) after PCA to a common width and
    unit-Frobenius scaling; lies in [0, sqrt(2)]."""
    x, y = _pair(x, y, 2)
    d = min(x.shape[1], y.shape[1], cfg.procrustes_dim_cap, x.shape[0])
    px, _ = _principal_scores(_center(x), k=d)
    py, _ = _principal_scores(_center(y), k=d)
    nx, ny = np.linalg.norm(px), np.linalg.norm(py)
    if nx == 0 or ny == 0:
        raise DegenerateInput("Procrustes distance undefined for a constant representation")
    sigma = np.linalg.svd((px / nx).T @ (py / ny), compute_uv=False)
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * sigma.sum())))


def knn_indices(x, k: int, block: int = 512) -> np.ndarray:
    """Exact Euclidean k nearest neighbours (self excluded), ties to the lower index.

    Returns an N x k integer array ordered by distance.
    """
    x = as_array(x)
    n = x.shape[0]
    if k >= n:
        raise KTooLarge(f"k={k} needs more than {k} samples, got {n}")
    sq = np.einsum("ij,ij->i", x, x)
    out = np.empty((n, k), dtype=np.intp)
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * (x[lo:hi] @ x.T)
        np.maximum(d2, 0.0, out=d2)
        rows = np.arange(hi - lo)
        d2[rows, rows + lo] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        kth = np.take_along_axis(d2, part, axis=1).max(axis=1)
        tied = (d2 <= kth[:, None]).sum(axis=1) > k
        pd = np.take_along_axis(d2, part, axis=1)
        order = np.lexsort((part, pd), axis=1)
        res = np.take_along_axis(part, order, axis=1)
        for r in np.flatnonzero(tied):
            res[r] = np.argsort(d2[r], kind="stable")[:k]
        out[lo:hi] = res
    return out


def jaccard_of_neighbors(nx: np.ndarray, ny: np.ndarray) -> np.ndarray:
    """Per-row Jaccard index of two k-neighbour index tables."""
    k = nx.shape[1]
    both = np.sort(np.hstack([nx, ny]), axis=1)
    inter = (both[:, 1:] == both[:, :-1]).sum(axis=1)
    return inter / (2 * k - inter)


def knn_jaccard(x, y, cfg: MetricConfig = MetricConfig()) -> float:
    x, y = _pair(x, y)
    k = cfg.knn_k
    if x.shape[0] <= k:
        raise KTooLarge(f"k={k} needs more than {k} samples, got {x.shape[0]}")
    return float(jaccard_of_neighbors(knn_indices(x, k), knn_indices(y, k)).mean())


def _ridge_r2(x, y, lam):
    n, d = x.shape
    if d <= n:
        a = x.T @ x
        a[np.diag_indices_from(a)] += lam
        b = linalg.solve(a, x.T @ y, assume_a="pos")
        pred = x @ b
    else:
        k = x @ x.T
        g = k.copy()
        g[np.diag_indices_from(g)] += lam
        pred = k @ linalg.solve(g, y, assume_a="pos")
    ss_tot = np.sum((y - y.mean(axis=0)) ** 2)
    if ss_tot == 0:
        raise DegenerateInput("target representation has no variance")
    return float(1.0 - np.sum((y - pred) ** 2) / ss_tot)


def ridge_cross_r2(x, y, cfg: MetricConfig = MetricConfig()) -> tuple:
    """In-sample R^2 of ridge maps X->Y and Y->X on standardized features."""
    x, y = _pair(x, y, 2)
    if not cfg.ridge_lambda > 0:
        raise SingularSystem("ridge_lambda must be > 0")
    xs, _ = standardize(x)
    ys, _ = standardize(y)
    return _ridge_r2(xs, ys, cfg.ridge_lambda), _ridge_r2(ys, xs, cfg.ridge_lambda)


def similarity(x, y, cfg: MetricConfig = MetricConfig()) -> SimilarityScores:
    r_xy, r_yx = ridge_cross_r2(x, y, cfg)
    return SimilarityScores(
        cka=linear_cka(x, y),
        svcca=svcca(x, y, cfg),
        procrustes=procrustes_distance(x, y, cfg),
        knn_jaccard=knn_jaccard(x, y, cfg),
        r2_x_to_y=r_xy,
        r2_y_to_x=r_yx,
    )


def similarity_report(encoders: Mapping, cfg: MetricConfig = MetricConfig()) -> MetricReport:
    """Score every unordered encoder pair; rows sorted by (encoder_a, encoder_b)."""
    if len(encoders) < 2:
        raise ConfigError("need at least two encoders")
    names = sorted(encoders)
    mats = {k: as_array(encoders[k]) for k in names}
    n = {m.shape[0] for m in mats.values()}
    if len(n) != 1:
        raise SampleCountMismatch(f"encoders disagree on sample count: {sorted(n)}")
    # neighbour tables are the expensive part; compute once per encoder
    neigh = {k: knn_indices(m, cfg.knn_k) for k, m in mats.items()}
    rep = MetricReport(list(REPORT_COLUMNS), meta={"config": asdict(cfg), "n_samples": n.pop()})
    for a, b in combinations(names, 2):
        xa, xb = mats[a], mats[b]
        r_ab, r_ba = ridge_cross_r2(xa, xb, cfg)
        rep.add(
            encoder_a=a,
            encoder_b=b,
            cka=linear_cka(xa, xb),
            svcca=svcca(xa, xb, cfg),
            procrustes=procrustes_distance(xa, xb, cfg),
            knn_jaccard=float(jaccard_of_neighbors(neigh[a], neigh[b]).mean()),
            r2_ab=r_ab,
            r2_ba=r_ba,
        )
    return rep
