"""Attention interpretability and tissue-cluster quality measures."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import AlignmentMismatch, DataError, EmptyMap, LengthMismatch, SingleClass
from .evalkit import ComparisonResult, bootstrap_indices
from .ranktest import ranksums
from .report import MetricReport
from .store import as_array

REGIONS = ("tumor", "benign", "background")
COVERAGE_PERCENTILES = (25, 50, 60, 70, 80, 90)
DICE_PERCENTILES = (50, 70, 90)


@dataclass(frozen=True, eq=False)
class AttentionMap:
    slide_id: str
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if len(coords) != len(values):
            raise LengthMismatch(f"{len(coords)} coords for {len(values)} attention values")
        if not np.isfinite(values).all() or (values < 0).any():
            raise DataError(f"{self.slide_id}: attention values must be finite and non-negative")
        if len({tuple(c) for c in coords.tolist()}) != len(coords):
            raise DataError(f"{self.slide_id}: duplicate tile coordinates")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True, eq=False)
class RegionMask:
    coords: np.ndarray
    regions: np.ndarray   # strings from REGIONS

    def __post_init__(self):
        regions = np.asarray(self.regions, dtype=object)
        bad = set(regions.tolist()) - set(REGIONS)
        if bad:
            raise DataError(f"unknown region classes {sorted(bad)}")
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.int64).reshape(-1, 2))
        object.__setattr__(self, "regions", regions)

    def aligned_to(self, a: AttentionMap) -> np.ndarray:
        """Region labels reordered to the attention map's tile order."""
        lookup = {tuple(c): r for c, r in zip(self.coords.tolist(), self.regions)}
        keys = [tuple(c) for c in a.coords.tolist()]
        if len(lookup) != len(keys) or any(k not in lookup for k in keys):
            raise AlignmentMismatch(f"region mask does not cover the same tiles as attention map {a.slide_id}")
        return np.array([lookup[k] for k in keys], dtype=object)


def load_attention_csv(path, slide_id=None) -> AttentionMap:
    rows = _read_rows(path, ("row", "col", "value"))
    return AttentionMap(slide_id or Path(path).stem, [[int(r["row"]), int(r["col"])] for r in rows],
                        [float(r["value"]) for r in rows])


def load_regions_csv(path) -> RegionMask:
    rows = _read_rows(path, ("row", "col", "region"))
    return RegionMask([[int(r["row"]), int(r["col"])] for r in rows], [r["region"].strip() for r in rows])


def write_attention_csv(a: AttentionMap, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        for (r, c), v in zip(a.coords.tolist(), a.values):
            w.writerow([r, c, repr(float(v))])


def _read_rows(path, fields):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(f not in reader.fieldnames for f in fields):
            raise DataError(f"{path}: expected columns {','.join(fields)}")
        try:
            return list(reader)
        except csv.Error as exc:
            raise DataError(f"{path}: {exc}") from None


# -------------------------------------------------------------- masks ----
def percentile_mask(a, p: float) -> np.ndarray:
    """Tiles whose attention strictly exceeds this map's p-th percentile."""
    values = a.values if isinstance(a, AttentionMap) else np.asarray(a, dtype=np.float64).ravel()
    if values.size == 0:
        raise EmptyMap("attention map has no tiles")
    if not 0 <= p < 100:
        raise DataError(f"percentile must lie in [0, 100), got {p}")
    return values > np.percentile(values, p)


def dice_flagged(mask_a, mask_b) -> tuple:
    """``(dice, both_empty)``; two empty masks count as perfect agreement."""
    a, b = np.asarray(mask_a, bool), np.asarray(mask_b, bool)
    if a.shape != b.shape:
        raise LengthMismatch(f"mask lengths differ: {a.size} vs {b.size}")
    total = int(a.sum() + b.sum())
    if total == 0:
        return 1.0, True
    return 2.0 * int(np.sum(a & b)) / total, False


def dice(mask_a, mask_b) -> float:
    return dice_flagged(mask_a, mask_b)[0]


def pairwise_dice(maps: Mapping[str, AttentionMap], percentiles=DICE_PERCENTILES) -> MetricReport:
    """Dice of percentile masks for every pair of maps over the same tiles."""
    names = sorted(maps)
    ref = maps[names[0]].coords
    for n in names[1:]:
        if not np.array_equal(maps[n].coords, ref):
            raise AlignmentMismatch(f"attention maps {names[0]} and {n} cover different tiles")
    rep = MetricReport(["map_a", "map_b", "percentile", "dice", "both_empty"])
    masks = {(n, p): percentile_mask(maps[n], p) for n in names for p in percentiles}
    for a, b in combinations(names, 2):
        for p in percentiles:
            d, flag = dice_flagged(masks[a, p], masks[b, p])
            rep.add(map_a=a, map_b=b, percentile=p, dice=d, both_empty=flag)
    return rep


def region_coverage(a: AttentionMap, r: RegionMask, p: float) -> dict:
    """Fraction of each tissue region's tiles that are attended at percentile p.

    Background is excluded; a region with no tiles maps to None.
    """
    regions = r.aligned_to(a) if isinstance(r, RegionMask) else np.asarray(r, dtype=object)
    if len(regions) != len(a):
        raise AlignmentMismatch("region labels and attention map differ in length")
    attended = percentile_mask(a, p)
    out = {}
    for name in REGIONS[:2]:
        sel = regions == name
        out[name] = float(attended[sel].mean()) if sel.any() else None
    return out


def coverage_curve(a: AttentionMap, r: RegionMask, percentiles=COVERAGE_PERCENTILES) -> MetricReport:
    rep = MetricReport(["slide_id", "percentile", "tumor", "benign"])
    for p in percentiles:
        cov = region_coverage(a, r, p)
        rep.add(slide_id=a.slide_id, percentile=p, **cov)
    return rep


# ---------------------------------------------------------- clusters ----
def _two_classes(x, labels):
    x = as_array(x)
    labels = np.asarray(labels)
    if len(labels) != x.shape[0]:
        raise LengthMismatch(f"{len(labels)} labels for {x.shape[0]} rows")
    classes = np.unique(labels)
    if len(classes) != 2:
        raise SingleClass(f"silhouette needs exactly two classes, found {len(classes)}")
    return x, labels, classes


def silhouette(x, labels, block: int = 1024) -> float:
    """Mean of (b - a) / max(a, b) with Euclidean distances; singleton classes score 0."""
    x, labels, classes = _two_classes(x, labels)
    n = x.shape[0]
    if n < 4:
        raise DataError("silhouette needs at least 4 samples")
    members = [labels == c for c in classes]
    sizes = np.array([m.sum() for m in members])
    sq = np.einsum("ij,ij->i", x, x)
    sums = np.zeros((n, 2))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        d = np.sqrt(np.maximum(sq[lo:hi, None] + sq[None, :] - 2.0 * x[lo:hi] @ x.T, 0.0))
        d[np.arange(hi - lo), np.arange(lo, hi)] = 0.0
        for j, m in enumerate(members):
            sums[lo:hi, j] = d[:, m].sum(axis=1)
    own = (labels == classes[1]).astype(int)
    other = 1 - own
    rows = np.arange(n)
    own_size = sizes[own]
    with np.errstate(invalid="ignore", divide="ignore"):
        a = sums[rows, own] / (own_size - 1)
        b = sums[rows, other] / sizes[other]
        s = (b - a) / np.maximum(a, b)
    s = np.where((own_size > 1) & np.isfinite(s), s, 0.0)
    return float(s.mean())


def compactness(x, labels) -> dict:
    """Per class: median Euclidean distance of members to the class centroid."""
    x = as_array(x)
    labels = np.asarray(labels)
    if len(labels) != x.shape[0]:
        raise LengthMismatch(f"{len(labels)} labels for {x.shape[0]} rows")
    out = {}
    for c in np.unique(labels):
        pts = x[labels == c]
        out[c.item() if hasattr(c, "item") else c] = float(np.median(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    return out


def cluster_stats(x, labels) -> dict:
    return {"silhouette": silhouette(x, labels), "compactness": compactness(x, labels)}


def clustering_bootstrap(xs: Mapping, labels, iters: int = 50, frac: float = 0.8, seed: int = 0) -> list:
    """Paired tile subsamples scored per feature set, then rank-sum tested per pair.

    Returns ComparisonResults for the silhouette and each class's compactness,
    one per unordered pair of feature sets, Bonferroni-sized by the pair count.
    """
    names = list(xs)
    labels = np.asarray(labels)
    mats = {k: as_array(v) for k, v in xs.items()}
    if len({m.shape[0] for m in mats.values()}) != 1 or next(iter(mats.values())).shape[0] != len(labels):
        raise AlignmentMismatch("feature sets and labels must share rows")
    idx = bootstrap_indices(len(labels), iters, frac, seed, labels)
    classes = np.unique(labels)
    stats = {k: {"silhouette": np.empty(iters), **{f"compactness_{c}": np.empty(iters) for c in classes}}
             for k in names}
    for i, ix in enumerate(idx):
        for k in names:
            sub, lab = mats[k][ix], labels[ix]
            stats[k]["silhouette"][i] = silhouette(sub, lab)
            for c, v in compactness(sub, lab).items():
                stats[k][f"compactness_{c}"][i] = v
    pairs = list(combinations(names, 2))
    out = []
    for a, b in pairs:
        for metric in stats[a]:
            vals = np.column_stack([stats[a][metric], stats[b][metric]])
            out.append(ComparisonResult(metric, vals, ranksums(vals[:, 0], vals[:, 1]),
                                        max(1, len(pairs)), idx, (a, b)))
    return out


def comparison_report(results: Sequence[ComparisonResult]) -> MetricReport:
    rep = MetricReport(["model_a", "model_b", "metric", "median_a", "median_b", "p_value",
                        "adjusted_p", "n_comparisons", "tier"])
    for r in results:
        rep.add(**r.row())
    return rep
