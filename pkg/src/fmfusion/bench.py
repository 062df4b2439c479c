"""Complementary-signal fusion benchmark with a fixed logistic probe.

Every feature set (each encoder alone, naive concatenation, pruned
concatenation at each theta) is scored by the same L2 logistic regression so
that differences come from the features, not from the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .evalkit import auc_score
from .prune import DEFAULT_THETAS, concat_encoders, correlation_matrix, correlation_prune, rank_features
from .synthgen import complementary_config, generate, logistic_scores


def stratified_indices(labels, seed: int, fractions=(0.5, 0.2)):
    """Per-class shuffled train / validation / test index arrays."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    parts = ([], [], [])
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        a = int(round(fractions[0] * len(idx)))
        b = a + int(round(fractions[1] * len(idx)))
        for part, chunk in zip(parts, (idx[:a], idx[a:b], idx[b:])):
            part.extend(chunk.tolist())
    return tuple(np.sort(np.array(p, dtype=np.intp)) for p in parts)


@dataclass
class FusionTrial:
    seed: int
    test_auc: dict                  # feature set -> test AUC
    val_auc: dict = field(default_factory=dict)   # theta -> validation AUC
    best_theta: float = float("nan")
    oracle_auc: dict = field(default_factory=dict)


def _probe(x, y, tr, ev, l2):
    return auc_score(logistic_scores(x[tr], y[tr], x[ev], l2), y[ev])


def fusion_trial(seed: int, thetas=DEFAULT_THETAS, l2: float = 1.0, oracle: bool = True, **overrides) -> FusionTrial:
    """One seed of the benchmark.

    The signature is fitted on the training rows only; theta is picked by
    validation AUC and reported on the test rows. With ``oracle`` the same
    probe is also fitted on the true latents (single encoder vs both).
    """
    cfg = complementary_config(seed, **overrides)
    encoders, y, truth = generate(cfg)
    tr, va, te = stratified_indices(y, seed)
    names = sorted(encoders)
    test = {k: _probe(encoders[k].values, y, tr, te, l2) for k in names}
    cat = concat_encoders({k: encoders[k] for k in names}).values
    test["concat"] = _probe(cat, y, tr, te, l2)

    ranked = rank_features(cat[tr], y[tr])
    corr = correlation_matrix(cat[tr])
    val, sigs = {}, {}
    for th in thetas:
        keep = list(correlation_prune(cat[tr], ranked, th, corr=corr).retained)
        sigs[th] = keep
        val[th] = _probe(cat[:, keep], y, tr, va, l2)
    best = max(thetas, key=lambda th: (val[th], -th))
    test["fusion"] = _probe(cat[:, sigs[best]], y, tr, te, l2)

    orc = {}
    if oracle:
        for i, k in enumerate(names):
            orc[k] = _probe(np.hstack([truth.shared, truth.unique[i]]), y, tr, te, l2)
        orc["fused"] = _probe(np.hstack([truth.shared, *truth.unique]), y, tr, te, l2)
    return FusionTrial(seed, test, val, best, orc)


def summarize(trials) -> dict:
    """Median of every test and oracle AUC across trials."""
    out = {k: float(np.median([t.test_auc[k] for t in trials])) for k in trials[0].test_auc}
    for k in trials[0].oracle_auc:
        out[f"oracle_{k}"] = float(np.median([t.oracle_auc[k] for t in trials]))
    return out
