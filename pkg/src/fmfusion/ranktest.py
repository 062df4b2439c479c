"""Two-sided Wilcoxon rank-sum / Mann-Whitney U test, column-vectorized.

Normal approximation with tie correction and no continuity correction.
"""

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import SingleClass


def _tie_term(x: np.ndarray) -> np.ndarray:
    """Per column sum of (t^3 - t) over groups of tied values."""
    n, d = x.shape
    s = np.sort(x, axis=0)
    starts = np.ones_like(s, dtype=bool)
    starts[1:] = s[1:] != s[:-1]
    flat = np.flatnonzero(starts.T.ravel())  # column-major so runs never span columns
    lengths = np.diff(np.append(flat, n * d)).astype(np.float64)
    cols = flat // n
    return np.bincount(cols, weights=lengths ** 3 - lengths, minlength=d)


def rank_sum_z(x, group) -> tuple:
    """U statistic of group 1 and its z-score for every column of ``x``.

    Returns ``(u1, z)``; z is 0 where the column carries no rank variance.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    group = np.asarray(group).astype(bool)
    n1 = int(group.sum())
    n0 = len(group) - n1
    if n1 == 0 or n0 == 0:
        raise SingleClass("rank-sum test needs both groups present")
    n = n0 + n1
    ranks = rankdata(x, axis=0)
    u1 = ranks[group].sum(axis=0) - n1 * (n1 + 1) / 2.0
    mu = n0 * n1 / 2.0
    var = n0 * n1 / 12.0 * ((n + 1) - _tie_term(x) / (n * (n - 1)))
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(var > 0, (u1 - mu) / np.sqrt(np.where(var > 0, var, 1.0)), 0.0)
    return u1, z


def rank_sum_test(x, group) -> tuple:
    """Column-wise ``(z, two_sided_p)``."""
    _, z = rank_sum_z(x, group)
    p = np.clip(2.0 * ndtr(-np.abs(z)), 0.0, 1.0)
    return z, p


def ranksums(a, b) -> float:
    """Two-sided rank-sum p-value between two 1-D samples."""
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    x = np.concatenate([a, b])
    g = np.concatenate([np.zeros(len(a), bool), np.ones(len(b), bool)])
    _, p = rank_sum_test(x, g)
    return float(p[0])
