"""Class-separation ranking, correlation pruning and the three fusion schemes."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, DimensionMismatch, EmptyInput, LengthMismatch, SingleClass
from .ranktest import rank_sum_test
from .report import MetricReport, dumps
from .store import EmbeddingMatrix, as_array, check_paired

DEFAULT_THETAS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.7)
COMPARE_MODES = ("ranked", "retained")


@dataclass(frozen=True)
class RankedFeatures:
    order: np.ndarray
    p_values: np.ndarray
    z_scores: np.ndarray


@dataclass(frozen=True)
class PrunedSignature:
    theta: float
    retained: tuple
    provenance: tuple
    source_dim: int

    def to_json(self) -> str:
        return dumps({
            "theta": self.theta,
            "source_dim": self.source_dim,
            "retained": [{"index": int(i), "encoder": e, "original_index": int(c)}
                         for i, (e, c) in zip(self.retained, self.provenance)],
        })

    @classmethod
    def from_json(cls, text: str) -> "PrunedSignature":
        doc = json.loads(text)
        rows = doc["retained"]
        return cls(float(doc["theta"]), tuple(r["index"] for r in rows),
                   tuple((r["encoder"], r["original_index"]) for r in rows), int(doc["source_dim"]))

    def __len__(self):
        return len(self.retained)


@dataclass(frozen=True)
class RetentionProfile:
    thetas: tuple
    encoders: tuple
    totals: dict          # encoder -> columns available
    counts: dict          # theta -> {encoder: retained}

    def overall_fraction(self, theta) -> float:
        return sum(self.counts[theta].values()) / sum(self.totals.values())

    def to_report(self) -> MetricReport:
        rep = MetricReport(["theta", "encoder", "retained", "total", "fraction", "share", "overall_fraction"])
        for t in self.thetas:
            kept = sum(self.counts[t].values())
            for e in self.encoders:
                c = self.counts[t][e]
                rep.add(theta=t, encoder=e, retained=c, total=self.totals[e],
                        fraction=c / self.totals[e], share=c / kept if kept else 0.0,
                        overall_fraction=self.overall_fraction(t))
        return rep


def concat_encoders(encoders: Mapping[str, EmbeddingMatrix], encoder_id: str | None = None) -> EmbeddingMatrix:
    """Horizontal concatenation in mapping order, provenance preserved per column."""
    mats = list(encoders.values())
    if not mats:
        raise EmptyInput("no encoders to concatenate")
    if len(mats) == 1 and encoder_id is None:
        return mats[0]
    check_paired(mats)
    prov = [p for m in mats for p in m.provenance]
    return EmbeddingMatrix(encoder_id or "+".join(encoders), mats[0].sample_ids,
                           np.hstack([m.values for m in mats]), prov)


def rank_features(x, labels) -> RankedFeatures:
    """Order columns by two-sided rank-sum p-value between the classes.

    The sort key is |z| (descending), which orders identically to the p-value
    but keeps resolving features whose p-values underflow to zero. Ties go to
    the lower column index.
    """
    x = as_array(x)
    labels = np.asarray(labels)
    if len(labels) != x.shape[0]:
        raise LengthMismatch(f"{len(labels)} labels for {x.shape[0]} rows")
    if len(np.unique(labels)) < 2:
        raise SingleClass("ranking needs both classes")
    if x.shape[0] < 4:
        raise EmptyInput("ranking needs at least 4 samples")
    z, p = rank_sum_test(x, labels == 1)
    order = np.lexsort((np.arange(x.shape[1]), -np.abs(z)))
    return RankedFeatures(order, p, z)


def correlation_matrix(x) -> np.ndarray:
    """Pearson correlations; rows/columns of constant features are NaN."""
    x = as_array(x)
    xc = x - x.mean(axis=0)
    norms = np.linalg.norm(xc, axis=0)
    const = norms < 1e-12 * max(1.0, np.abs(x).max())
    zc = xc / np.where(const, 1.0, norms)
    c = np.clip(zc.T @ zc, -1.0, 1.0)
    c[const, :] = np.nan
    c[:, const] = np.nan
    return c


def _prior_max_corr(corr, order):
    """For each feature in rank order, max |r| with any higher-ranked feature."""
    a = np.abs(corr[np.ix_(order, order)])
    a = np.nan_to_num(a, nan=0.0)
    a = np.triu(a, 1)
    out = a.max(axis=0)
    out[0] = -np.inf
    return out


def _constant_mask(corr):
    return np.isnan(np.diag(corr))


def _select(corr, order, theta, compare="ranked", prior=None):
    const = _constant_mask(corr)[order]
    if compare == "ranked":
        if prior is None:
            prior = _prior_max_corr(corr, order)
        keep = (prior <= theta) & ~const
        keep[0] = True
        return order[keep]
    if compare != "retained":
        raise ConfigError(f"compare must be one of {COMPARE_MODES}")
    a = np.nan_to_num(np.abs(corr), nan=0.0)
    running = np.full(corr.shape[0], -np.inf)
    kept = []
    for rank, j in enumerate(order):
        if rank == 0 or (not const[rank] and running[j] <= theta):
            kept.append(j)
            np.maximum(running, a[j], out=running)
    return np.asarray(kept, dtype=np.intp)


def _signature(x, retained, theta):
    prov = tuple(x.provenance[i] for i in retained) if isinstance(x, EmbeddingMatrix) \
        else tuple(("x", int(i)) for i in retained)
    return PrunedSignature(float(theta), tuple(int(i) for i in retained), prov, as_array(x).shape[1])


def _check_theta(theta):
    if not 0 < theta <= 1:
        raise ConfigError(f"theta must lie in (0, 1], got {theta}")


def correlation_prune(x, ranked: RankedFeatures, theta: float, compare: str = "ranked",
                      corr: np.ndarray | None = None) -> PrunedSignature:
    """Greedy scan in rank order keeping features whose |Pearson r| with
    higher-ranked features never exceeds ``theta``.

    ``compare="ranked"`` tests each candidate against every higher-ranked
    feature, which makes retained sets nested in theta. ``compare="retained"``
    tests only against features kept so far.
    """
    _check_theta(theta)
    xa = as_array(x)
    if xa.size == 0 or len(ranked.order) == 0:
        raise EmptyInput("nothing to prune")
    if len(ranked.order) != xa.shape[1]:
        raise DimensionMismatch(f"ranking covers {len(ranked.order)} features, matrix has {xa.shape[1]}")
    if corr is None:
        corr = correlation_matrix(xa)
    return _signature(x, _select(corr, np.asarray(ranked.order), theta, compare), theta)


def sweep_thetas(x, labels, thetas: Sequence[float] = DEFAULT_THETAS, compare: str = "ranked",
                 ranked: RankedFeatures | None = None):
    """Prune at every theta with a single ranking and correlation matrix.

    Returns ``(signatures, profile)``.
    """
    thetas = [float(t) for t in thetas]
    if not thetas:
        raise ConfigError("theta grid is empty")
    for t in thetas:
        _check_theta(t)
    if ranked is None:
        ranked = rank_features(x, labels)
    corr = correlation_matrix(x)
    order = np.asarray(ranked.order)
    prior = _prior_max_corr(corr, order) if compare == "ranked" else None
    sigs = [_signature(x, _select(corr, order, t, compare, prior), t) for t in thetas]
    return sigs, retention_profile(x, sigs)


def retention_profile(x, sigs: Sequence[PrunedSignature]) -> RetentionProfile:
    prov = x.provenance if isinstance(x, EmbeddingMatrix) else tuple(("x", i) for i in range(as_array(x).shape[1]))
    encoders = tuple(OrderedDict.fromkeys(e for e, _ in prov))
    totals = {e: sum(1 for p in prov if p[0] == e) for e in encoders}
    counts = {}
    for s in sigs:
        c = {e: 0 for e in encoders}
        for e, _ in s.provenance:
            c[e] += 1
        counts[s.theta] = c
    return RetentionProfile(tuple(s.theta for s in sigs), encoders, totals, counts)


def apply_signature(x, sig: PrunedSignature):
    """Select the signature's columns (in signature order) from a matrix of the same width."""
    xa = as_array(x)
    if xa.shape[1] != sig.source_dim:
        raise DimensionMismatch(f"signature expects {sig.source_dim} columns, got {xa.shape[1]}")
    cols = np.asarray(sig.retained, dtype=np.intp)
    if isinstance(x, EmbeddingMatrix):
        return x.take_columns(cols, encoder_id=f"IF@{sig.theta:g}")
    return xa[:, cols]


@dataclass(frozen=True)
class VoteResult:
    labels: np.ndarray
    ties: np.ndarray

    @property
    def n_ties(self) -> int:
        return int(self.ties.sum())


def majority_vote(predictions: Sequence) -> VoteResult:
    """Per-sample modal label over models; exact ties resolve to 1 and are flagged."""
    preds = [np.asarray(p) for p in predictions]
    if len(preds) < 2:
        raise ConfigError("majority vote needs at least two models")
    if len({len(p) for p in preds}) != 1:
        raise LengthMismatch(f"prediction lengths differ: {[len(p) for p in preds]}")
    votes = np.vstack(preds).astype(np.int64)
    if not np.isin(votes, (0, 1)).all():
        raise ConfigError("predictions must be 0/1 labels")
    ones = votes.sum(axis=0)
    zeros = votes.shape[0] - ones
    ties = ones == zeros
    return VoteResult((ones >= zeros).astype(np.int64), ties)


def common_features(signatures: Mapping[str, PrunedSignature]) -> set:
    """(encoder, original column) pairs retained by every task's signature."""
    sigs = list(signatures.values())
    if len(sigs) < 2:
        raise ConfigError("need signatures from at least two tasks")
    if len({s.source_dim for s in sigs}) != 1:
        raise DimensionMismatch("signatures were built on different feature spaces")
    common = set(sigs[0].provenance)
    for s in sigs[1:]:
        common &= set(s.provenance)
    return common
