"""Exact t-SNE (O(N^2) per iteration) with per-point perplexity calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PerplexityTooLarge, TooManyPoints
from .store import as_array

MAX_POINTS = 20_000


@dataclass
class TsneResult:
    embedding: np.ndarray
    kl: np.ndarray          # KL(P || Q) at each iteration, against the unexaggerated P
    betas: np.ndarray       # per-point precision 1 / (2 sigma^2)


def _sq_dists(x):
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def conditional_p(d2, perplexity, tol=1e-5, max_steps=50):
    """Row-wise Gaussian conditionals whose entropy matches log(perplexity).

    Bisection on the precision beta per point; returns ``(P, betas)``.
    """
    n = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        di = np.delete(d2[i], i)
        di = di - di.min()
        lo, hi, beta = 0.0, np.inf, 1.0
        for _ in range(max_steps):
            w = np.exp(-di * beta)
            s = w.sum()
            h = np.log(s) + beta * np.dot(di, w) / s
            diff = h - target
            if abs(diff) < tol:
                break
            if diff > 0:    # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        betas[i] = beta
        p[i, np.arange(n) != i] = w / s
    return p, betas


def tsne(x, perplexity: float = 30.0, iters: int = 1000, seed: int = 0, learning_rate: float = 200.0,
         exaggeration: float = 12.0, exaggeration_iters: int = 250, momentum: float = 0.5,
         final_momentum: float = 0.8, momentum_switch: int = 250, init_scale: float = 1e-4,
         min_gain: float = 0.01) -> TsneResult:
    x = as_array(x)
    n = x.shape[0]
    if n > MAX_POINTS:
        raise TooManyPoints(f"exact t-SNE is capped at {MAX_POINTS} points, got {n}")
    if not 0 < perplexity < n / 3:
        raise PerplexityTooLarge(f"perplexity {perplexity} must be below N/3 = {n / 3:.1f}")
    cond, betas = conditional_p(_sq_dists(x), perplexity)
    p = (cond + cond.T) / (2.0 * n)
    p = np.maximum(p, 1e-12)
    np.fill_diagonal(p, 0.0)
    logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, init_scale, size=(n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    kl = np.empty(iters)
    for it in range(iters):
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        exag = exaggeration if it < exaggeration_iters else 1.0
        pq = (exag * p - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        mom = momentum if it < momentum_switch else final_momentum
        same = np.sign(grad) == np.sign(update)
        gains = np.where(same, gains * 0.8, gains + 0.2)
        np.maximum(gains, min_gain, out=gains)
        update = mom * update - learning_rate * gains * grad
        y = y + update
        y -= y.mean(axis=0)
        kl[it] = np.sum(p * (logp - np.log(q)))
    return TsneResult(y, kl, betas)
