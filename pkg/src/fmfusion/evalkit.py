"""Patient-stratified splitting, classification metrics and paired bootstrap comparison."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, LengthMismatch, SingleClassAUC, TooFewPatients, TooFewSamples
from .ranktest import ranksums
from .report import dumps

METRICS = ("auc", "sensitivity", "specificity", "f1")


# ------------------------------------------------------------- splits ----
@dataclass(frozen=True)
class SplitPlan:
    holdout: tuple
    folds: tuple   # ((train_ids, val_ids), ...)
    seed: int

    def to_json(self) -> str:
        return dumps({"seed": self.seed, "holdout": list(self.holdout),
                      "folds": [{"train": list(t), "val": list(v)} for t, v in self.folds]})

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(tuple(d["holdout"]), tuple((tuple(f["train"]), tuple(f["val"])) for f in d["folds"]), d["seed"])

    @property
    def development(self) -> tuple:
        """All non-holdout patients."""
        t, v = self.folds[0]
        return tuple(sorted(set(t) | set(v)))


def _take_count(n, frac):
    return max(1, int(round(frac * n))) if frac > 0 else 0


def make_splits(patients: Sequence, k: int = 3, holdout_frac: float = 0.10, val_frac: float = 0.10,
                seed: int = 0) -> SplitPlan:
    """Stratified holdout, then ``k`` fold rotations with disjoint validation sets.

    ``patients`` is a sequence of (patient_id, label). Per class, the holdout
    takes round(holdout_frac * n_class) patients; the rest are dealt into k
    chunks and fold i validates on round(val_frac * n_dev_class) patients of
    chunk i, training on every other development patient.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    labels = {}
    for pid, lab in patients:
        if labels.setdefault(str(pid), int(lab)) != int(lab):
            raise ConfigError(f"patient {pid!r} listed with two labels")
    rng = np.random.default_rng(seed)
    holdout, chunks, dev_sizes = [], [[] for _ in range(k)], {}
    for cls in (0, 1):
        ids = sorted(p for p, l in labels.items() if l == cls)
        if len(ids) < k + 1:
            raise TooFewPatients(f"class {cls} has {len(ids)} patients, need at least {k + 1}")
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_hold = _take_count(len(ids), holdout_frac)
        if len(ids) - n_hold < k:
            raise TooFewPatients(f"class {cls}: too few patients left after holdout for {k} folds")
        holdout += ids[:n_hold]
        dev = ids[n_hold:]
        dev_sizes[cls] = len(dev)
        for i, pid in enumerate(dev):
            chunks[i % k].append((pid, cls))
    dev_all = sorted(p for c in chunks for p, _ in c)
    folds = []
    for i in range(k):
        val = []
        for cls in (0, 1):
            members = [p for p, c in chunks[i] if c == cls]
            want = min(len(members), _take_count(dev_sizes[cls], val_frac))
            val += members[:want]
        val_set = set(val)
        folds.append((tuple(p for p in dev_all if p not in val_set), tuple(sorted(val))))
    return SplitPlan(tuple(sorted(holdout)), tuple(folds), seed)


# ------------------------------------------------------------ metrics ----
@dataclass(frozen=True)
class ClassificationMetrics:
    auc: float | None
    sensitivity: float | None
    specificity: float | None
    f1: float
    f1_degenerate: bool = False

    def as_dict(self):
        return {"auc": self.auc, "sensitivity": self.sensitivity, "specificity": self.specificity, "f1": self.f1}


def auc_score(probs, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(tie)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if probs.shape != labels.shape:
        raise LengthMismatch(f"{len(probs)} scores vs {len(labels)} labels")
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassAUC("AUC needs both classes")
    r = rankdata(probs)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(probs, labels, threshold: float = 0.5) -> ClassificationMetrics:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.shape != labels.shape:
        raise LengthMismatch(f"{len(probs)} scores vs {len(labels)} labels")
    pred = probs >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fn = int(np.sum(~pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    try:
        auc = auc_score(probs, labels)
    except SingleClassAUC:
        auc = None
    sen = tp / (tp + fn) if tp + fn else None
    spe = tn / (tn + fp) if tn + fp else None
    degenerate = tp + fp == 0
    f1 = 0.0 if degenerate else 2 * tp / (2 * tp + fp + fn)
    return ClassificationMetrics(auc, sen, spe, f1, degenerate)


def metric_value(name, probs, labels, threshold=0.5) -> float:
    if name not in METRICS:
        raise ConfigError(f"unknown metric {name!r}; choose from {METRICS}")
    if name == "auc":
        return auc_score(probs, labels)
    v = getattr(compute_metrics(probs, labels, threshold), name)
    return float("nan") if v is None else float(v)


# ---------------------------------------------------------- bootstrap ----
@dataclass
class ComparisonResult:
    metric: str
    values: np.ndarray          # iters x 2
    p_value: float
    n_comparisons: int = 1
    indices: np.ndarray = None  # iters x m, shared by both sides
    names: tuple = ("a", "b")
    extra: dict = field(default_factory=dict)

    @property
    def adjusted_p(self) -> float:
        return min(1.0, self.p_value * self.n_comparisons)

    @property
    def tier(self) -> str:
        return significance_tier(self.p_value, self.n_comparisons)

    def row(self) -> dict:
        return {"model_a": self.names[0], "model_b": self.names[1], "metric": self.metric,
                "median_a": float(np.median(self.values[:, 0])), "median_b": float(np.median(self.values[:, 1])),
                "p_value": self.p_value, "adjusted_p": self.adjusted_p, "n_comparisons": self.n_comparisons,
                "tier": self.tier}


def bootstrap_indices(n, iters, frac, seed, labels=None, max_redraws=1000):
    """Per-iteration index sets of floor(frac * n) drawn without replacement.

    With ``labels`` given, draws lacking one class are redrawn.
    """
    m = int(math.floor(frac * n))
    if m < 2:
        raise TooFewSamples(f"{frac} of {n} samples leaves {m}")
    rng = np.random.default_rng(seed)
    out = np.empty((iters, m), dtype=np.intp)
    for i in range(iters):
        for _ in range(max_redraws):
            idx = np.sort(rng.choice(n, size=m, replace=False))
            if labels is None or len(np.unique(labels[idx])) == 2:
                break
        else:
            raise TooFewSamples("could not draw a subsample containing both classes")
        out[i] = idx
    return out


def bootstrap_compare(model_a_preds, model_b_preds, labels, metric: str = "auc", iters: int = 50,
                      frac: float = 0.8, seed: int = 0, n_comparisons: int = 1,
                      names=("a", "b"), threshold: float = 0.5) -> ComparisonResult:
    """Paired subsampling comparison of two models on the same holdout samples.

    Both models are scored on the identical index set each iteration; the
    two per-iteration samples are compared with a two-sided rank-sum test.
    """
    a = np.asarray(model_a_preds, dtype=np.float64)
    b = np.asarray(model_b_preds, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if not (a.shape == b.shape == labels.shape):
        raise LengthMismatch("prediction vectors and labels must align")
    if len(labels) < 3:
        raise TooFewSamples("need at least 3 holdout samples")
    idx = bootstrap_indices(len(labels), iters, frac, seed, labels if metric == "auc" else None)
    vals = np.empty((iters, 2))
    for i, ix in enumerate(idx):
        vals[i, 0] = metric_value(metric, a[ix], labels[ix], threshold)
        vals[i, 1] = metric_value(metric, b[ix], labels[ix], threshold)
    return ComparisonResult(metric, vals, _safe_ranksums(vals[:, 0], vals[:, 1]), n_comparisons, idx, tuple(names))


def _safe_ranksums(x, y) -> float:
    x, y = x[np.isfinite(x)], y[np.isfinite(y)]
    if len(x) == 0 or len(y) == 0:
        return 1.0
    return ranksums(x, y)


def significance_tier(p: float, n: int = 1) -> str:
    """Bonferroni ladder on the raw p-value: 0.05/n, 0.01/n, 0.001/n."""
    if n < 1:
        raise ConfigError("number of comparisons must be >= 1")
    if p < 0.001 / n:
        return "***"
    if p < 0.01 / n:
        return "**"
    if p < 0.05 / n:
        return "*"
    return "ns"
