"""Subcommand bodies. Each takes a RunConfig and returns the written run manifest path."""

from __future__ import annotations

import csv
import json
import os
import zlib
from itertools import combinations
from pathlib import Path

import numpy as np

from . import lens
from .errors import ConfigInvalid, DataError, LengthMismatch
from .evalkit import METRICS, SplitPlan, bootstrap_compare, compute_metrics, make_splits
from .heads import TrainConfig, predict, save_checkpoint, train_mil, train_mlp
from .prune import (
    DEFAULT_THETAS,
    PrunedSignature,
    apply_signature,
    concat_encoders,
    majority_vote,
    sweep_thetas,
)
from .report import MetricReport, dumps
from .runconfig import RunConfig, RunRecord
from .simgauge import MetricConfig, similarity_report
from .store import (
    BagDataset,
    EmbeddingMatrix,
    SlideVectorDataset,
    load_embedding,
    load_manifest,
    standardize,
    subsample_tiles,
    write_embedding_binary,
    write_embedding_csv,
    write_manifest,
)
from .synthgen import GeneratorConfig, generate, generate_bags
from .tsne import tsne

PRED_COLUMNS = ["sample_id", "patient_id", "label", "prob_high", "pred"]


# ------------------------------------------------------------ helpers ----
def _out_dir(cfg: RunConfig, sec: dict, default: str) -> Path:
    out = cfg.path(sec["output_dir"]) if "output_dir" in sec else cfg.output_dir() / default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(sec: dict, key: str, name: str):
    if key not in sec:
        raise ConfigInvalid(f"section {name!r} needs {key!r}")
    return sec[key]


def _derived_seed(*parts) -> int:
    """Stable integer seed from ints and strings (no Python hash randomisation)."""
    ints = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


def _load_dataset(cfg: RunConfig, rec: RunRecord, sec: dict, name: str):
    path = rec.use(cfg.path(_require(sec, "manifest", name)))
    ds = load_manifest(path)
    for slide_file in _manifest_files(path):
        rec.use(slide_file)
    return ds


def _manifest_files(path: Path):
    doc = json.loads(path.read_text())
    files = set()
    for e in doc.get("slides", []):
        files.update(path.parent / p for p in e.get("embeddings", {}).values())
        if e.get("coords_path"):
            files.add(path.parent / e["coords_path"])
    return sorted(files)


def _encoders(ds, sec: dict):
    have = ds.encoders if isinstance(ds, BagDataset) else list(ds.encoders)
    want = list(sec.get("encoders") or have)
    missing = [e for e in want if e not in have]
    if missing:
        raise DataError(f"encoders {missing} not in dataset (has {have})")
    return sorted(want)


def _split_plan(cfg: RunConfig, rec: RunRecord, ds, sec: dict) -> SplitPlan:
    if sec.get("splits"):
        return SplitPlan.from_json(rec.use(cfg.path(sec["splits"])).read_text())
    sp = cfg.section("splits")
    patients = sorted(set(zip(ds.patient_ids, ds.labels.tolist())))
    return make_splits(patients, k=sp.get("k", 3), holdout_frac=sp.get("holdout_frac", 0.10),
                       val_frac=sp.get("val_frac", 0.10), seed=sp.get("seed", cfg.seed))


def _slide_rows(ds, patients):
    keep = set(patients)
    return np.array([i for i, p in enumerate(ds.patient_ids) if p in keep], dtype=np.intp)


def _thetas(sec):
    th = tuple(float(t) for t in sec.get("thetas", DEFAULT_THETAS))
    if not th:
        raise ConfigInvalid("theta grid is empty")
    return th


def _write_predictions(path, ids, patients, labels, probs) -> Path:
    rep = MetricReport(list(PRED_COLUMNS))
    for s, p, y, q in zip(ids, patients, labels, probs):
        rep.add(sample_id=s, patient_id=p, label=int(y), prob_high=float(q), pred=int(q >= 0.5))
    Path(path).write_text(rep.to_csv())
    return Path(path)


def read_predictions(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in ("sample_id", "label", "prob_high")):
            raise DataError(f"{path}: prediction files need sample_id,label,prob_high columns")
        rows = list(reader)
    if not rows:
        raise DataError(f"{path}: no predictions")
    ids = [r["sample_id"] for r in rows]
    try:
        labels = np.array([int(r["label"]) for r in rows])
        probs = np.array([float(r["prob_high"]) for r in rows])
        preds = np.array([int(r["pred"]) if r.get("pred") not in (None, "") else int(float(r["prob_high"]) >= 0.5)
                          for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    patients = [r.get("patient_id", "") for r in rows]
    return ids, patients, labels, probs, preds


def _write_grid_csv(path, coords, region=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "col"] + (["region"] if region is not None else []))
        for i, (r, c) in enumerate(coords):
            w.writerow([int(r), int(c)] + ([region[i]] if region is not None else []))


# --------------------------------------------------------------- synth ----
def cmd_synth(cfg: RunConfig) -> Path:
    """Generate a synthetic cohort and write it through the store formats."""
    sec = cfg.section("synth")
    out = _out_dir(cfg, sec, "synth")
    rec = RunRecord("synth", out, {"seed": cfg.seed, "synth": sec})
    gen = dict(_require(sec, "generator", "synth"))
    gen.setdefault("seed", cfg.seed)
    gcfg = GeneratorConfig.from_dict(gen)
    fmt = sec.get("format", "binary")
    if fmt not in ("binary", "csv"):
        raise ConfigInvalid("synth.format must be 'binary' or 'csv'")
    ext = ".embg" if fmt == "binary" else ".csv"
    writer = write_embedding_binary if fmt == "binary" else write_embedding_csv
    (out / "embeddings").mkdir(exist_ok=True)

    if gcfg.bag_mode is None:
        encoders, labels, truth = generate(gcfg)
        ids = list(next(iter(encoders.values())).sample_ids)
        ds = SlideVectorDataset(encoders, [f"P{i:04d}" for i in range(len(ids))], labels)
        paths = {}
        for enc, m in encoders.items():
            rel = f"embeddings/{enc}{ext}"
            writer(m, out / rel)
            rec.made(out / rel)
            for sid in ids:
                paths.setdefault(sid, {})[enc] = rel
        write_manifest(out / "manifest.json", ds, paths, kind="slide_vectors")
        truth_doc = {"informative": truth.informative, "label_prob": truth.label_prob}
    else:
        ds, truth = generate_bags(gcfg)
        paths, coords = {}, {}
        for sub in ("coords", "regions"):
            (out / sub).mkdir(exist_ok=True)
        for s, signal in zip(ds.slides, truth.extra["signal"]):
            for enc, tiles in s.tiles.items():
                rel = f"embeddings/{s.slide_id}_{enc}{ext}"
                writer(EmbeddingMatrix(enc, [f"{s.slide_id}:{t}" for t in range(s.n_tiles)], tiles), out / rel)
                rec.made(out / rel)
                paths.setdefault(s.slide_id, {})[enc] = rel
            coords[s.slide_id] = f"coords/{s.slide_id}.csv"
            _write_grid_csv(out / coords[s.slide_id], s.coords)
            # signal tiles play the annotated-tumour role for attention coverage
            _write_grid_csv(out / "regions" / f"{s.slide_id}.csv", s.coords,
                            region=np.where(signal, "tumor", "benign"))
            rec.made(out / coords[s.slide_id], out / "regions" / f"{s.slide_id}.csv")
        write_manifest(out / "manifest.json", ds, paths, kind="bags", coords_paths=coords)
        truth_doc = {"informative": truth.informative,
                     "signal": {s.slide_id: np.flatnonzero(m) for s, m in zip(ds.slides, truth.extra["signal"])}}
    (out / "truth.json").write_text(dumps({**truth_doc, "generator": json.loads(gcfg.to_json())}))
    rec.made(out / "manifest.json", out / "truth.json")
    return rec.write()


# ---------------------------------------------------------- similarity ----
def cmd_similarity(cfg: RunConfig) -> Path:
    """Pairwise similarity report over paired tile (or slide) rows."""
    sec = cfg.section("similarity")
    out = _out_dir(cfg, sec, "similarity")
    rec = RunRecord("similarity", out, {"seed": cfg.seed, "similarity": sec})
    mcfg = MetricConfig(**sec.get("metric", {}))
    if "embeddings" in sec:
        mats = {name: load_embedding(rec.use(cfg.path(p)), name) for name, p in sorted(sec["embeddings"].items())}
        n = {m.n for m in mats.values()}
        if len(n) != 1:
            raise DataError(f"embedding files disagree on row count: {sorted(n)}")
        if sec.get("n_tiles") and sec["n_tiles"] < n.pop():
            pick = np.sort(np.random.default_rng(cfg.seed).permutation(next(iter(mats.values())).n)[: sec["n_tiles"]])
            mats = {k: m.take_rows(pick) for k, m in mats.items()}
    else:
        ds = _load_dataset(cfg, rec, sec, "similarity")
        encs = _encoders(ds, sec)
        if isinstance(ds, BagDataset):
            total = sum(s.n_tiles for s in ds.slides)
            n = min(int(sec.get("n_tiles", 50_000)), total)
            mats = subsample_tiles(ds, n, cfg.seed, encs).matrices
        else:
            mats = {e: ds.encoders[e] for e in encs}
    rep = similarity_report(mats, mcfg)
    rep.meta["seed"] = cfg.seed
    rec.made(rep.write(out / "similarity"))
    return rec.write()


# ---------------------------------------------------------------- fuse ----
def _fusion_matrix(cfg, ds, encs, rows, sec):
    """Concatenated development features used to fit signatures (slide rows or sampled tiles)."""
    if isinstance(ds, SlideVectorDataset):
        cat = concat_encoders({e: ds.encoders[e] for e in encs})
        return cat.take_rows(rows), ds.labels[rows]
    sub = ds.subset([ds.slides[i].slide_id for i in rows])
    total = sum(s.n_tiles for s in sub.slides)
    n = min(int(sec.get("n_tiles", 50_000)), total)
    tiles = subsample_tiles(sub, n, cfg.seed, encs)
    return concat_encoders({e: tiles.matrices[e] for e in encs}), tiles.labels


def cmd_fuse(cfg: RunConfig) -> Path:
    """Rank and prune the concatenated development features across the theta grid."""
    sec = cfg.section("fuse")
    out = _out_dir(cfg, sec, "fuse")
    rec = RunRecord("fuse", out, {"seed": cfg.seed, "fuse": sec, "splits": cfg.section("splits")})
    ds = _load_dataset(cfg, rec, sec, "fuse")
    encs = _encoders(ds, sec)
    plan = _split_plan(cfg, rec, ds, sec)
    rows = _slide_rows(ds, plan.development)
    x, y = _fusion_matrix(cfg, ds, encs, rows, sec)
    sigs, profile = sweep_thetas(x, y, _thetas(sec), sec.get("compare", "ranked"))
    (out / "signatures").mkdir(exist_ok=True)
    for s in sigs:
        p = out / "signatures" / f"theta_{s.theta:g}.json"
        p.write_text(s.to_json())
        rec.made(p)
    rep = profile.to_report()
    rep.meta.update(encoders=encs, n_rows=int(x.n))
    rec.made(rep.write(out / "retention"))
    (out / "splits.json").write_text(plan.to_json())
    rec.made(out / "splits.json")
    return rec.write()


# --------------------------------------------------------------- train ----
def _feature_sets(sec, encs):
    sets = sec.get("feature_sets")
    if sets is None:
        sets = list(encs) + (["concat"] if len(encs) > 1 else [])
    return list(sets)


def _load_signatures(cfg, rec, sec):
    if not sec.get("signatures"):
        return {}
    d = cfg.path(sec["signatures"])
    if not d.is_dir():
        raise DataError(f"missing directory: {d}")
    sigs = {}
    for p in sorted(d.glob("theta_*.json")):
        s = PrunedSignature.from_json(rec.use(p).read_text())
        sigs[f"fusion@{s.theta:g}"] = s
    return sigs


def _slide_features(ds: SlideVectorDataset, name, encs, sigs):
    if name in encs:
        return ds.encoders[name].values
    cat = concat_encoders({e: ds.encoders[e] for e in encs})
    if name == "concat":
        return cat.values
    if name in sigs:
        return apply_signature(cat, sigs[name]).values
    raise ConfigInvalid(f"unknown feature set {name!r}; use an encoder, 'concat' or a fuse signature")


def _bag_features(ds: BagDataset, name, encs, sigs):
    def one(s):
        if name in encs:
            return s.tiles[name]
        cat = np.hstack([s.tiles[e] for e in encs])
        if name == "concat":
            return cat
        if name in sigs:
            return apply_signature(cat, sigs[name])
        raise ConfigInvalid(f"unknown feature set {name!r}; use an encoder, 'concat' or a fuse signature")
    return [one(s) for s in ds.slides]


def cmd_train(cfg: RunConfig) -> Path:
    """Train one head per feature set and fold; write checkpoints, histories and holdout predictions.

    Holdout probabilities are averaged over the k fold models into
    ``predictions/<feature_set>.csv``.
    """
    sec = cfg.section("train")
    out = _out_dir(cfg, sec, "train")
    rec = RunRecord("train", out, {"seed": cfg.seed, "train": sec, "splits": cfg.section("splits")})
    ds = _load_dataset(cfg, rec, sec, "train")
    encs = _encoders(ds, sec)
    plan = _split_plan(cfg, rec, ds, sec)
    sigs = _load_signatures(cfg, rec, sec)
    sets = _feature_sets(sec, encs)
    if "feature_sets" not in sec:
        sets += sorted(sigs, key=lambda s: float(s.split("@")[1]))
    model_kind = sec.get("model", "mil" if isinstance(ds, BagDataset) else "mlp")
    if model_kind not in ("mil", "mlp"):
        raise ConfigInvalid("train.model must be 'mil' or 'mlp'")
    if model_kind == "mil" and not isinstance(ds, BagDataset):
        raise ConfigInvalid("MIL training needs a bag manifest")
    arch = dict(sec.get("arch", {}))
    base_tc = dict(sec.get("config", {}))
    hold = _slide_rows(ds, plan.holdout)
    ids = [s.slide_id for s in ds.slides] if isinstance(ds, BagDataset) else list(ds.slide_ids)
    for sub in ("checkpoints", "histories", "predictions"):
        (out / sub).mkdir(exist_ok=True)

    for name in sets:
        if model_kind == "mil" or isinstance(ds, BagDataset):
            feats = _bag_features(ds, name, encs, sigs)
        else:
            feats = _slide_features(ds, name, encs, sigs)
        fold_probs, fold_attn = [], []
        for f, (tr_p, va_p) in enumerate(plan.folds):
            tr, va = _slide_rows(ds, tr_p), _slide_rows(ds, va_p)
            tc = TrainConfig(**{**base_tc, "seed": _derived_seed(cfg.seed, f, name)})
            if model_kind == "mlp":
                if isinstance(ds, BagDataset):
                    feats_v = np.vstack([b.mean(axis=0) for b in feats])
                else:
                    feats_v = feats
                xtr, stats = standardize(feats_v[tr])
                z = standardize(feats_v, stats)[0]
                tm = train_mlp(xtr, ds.labels[tr], z[va], ds.labels[va], tc, **arch)
                pr = predict(tm, z[hold])
            else:
                tm = train_mil([feats[i] for i in tr], ds.labels[tr], [feats[i] for i in va], ds.labels[va], tc, **arch)
                pr = predict(tm, [feats[i] for i in hold])
                fold_attn.append(pr.attention)
            tag = f"{name}_fold{f}"
            save_checkpoint(tm, out / "checkpoints" / f"{tag}.embh")
            tm.history_report().write(out / "histories" / tag)
            rec.made(out / "checkpoints" / f"{tag}.embh", out / "histories" / f"{tag}.csv",
                     out / "histories" / f"{tag}.json")
            fold_probs.append(pr.prob_high)
        probs = np.mean(fold_probs, axis=0)
        p = _write_predictions(out / "predictions" / f"{name}.csv", [ids[i] for i in hold],
                               [ds.patient_ids[i] for i in hold], ds.labels[hold], probs)
        rec.made(p)
        if fold_attn:
            # fold-averaged holdout attention, one CSV per slide, for the attention command
            adir = out / "attention" / name
            adir.mkdir(parents=True, exist_ok=True)
            for j, i in enumerate(hold):
                s = ds.slides[i]
                values = np.mean([fa[j] for fa in fold_attn], axis=0)
                lens.write_attention_csv(lens.AttentionMap(s.slide_id, s.coords, values), adir / f"{s.slide_id}.csv")
                rec.made(adir / f"{s.slide_id}.csv")
    (out / "splits.json").write_text(plan.to_json())
    rec.made(out / "splits.json")
    return rec.write()


# ---------------------------------------------------------------- vote ----
def cmd_vote(cfg: RunConfig) -> Path:
    """Majority vote over prediction files; prob_high is the fraction of positive votes."""
    sec = cfg.section("vote")
    out = _out_dir(cfg, sec, "vote")
    rec = RunRecord("vote", out, {"seed": cfg.seed, "vote": sec})
    files = _require(sec, "predictions", "vote")
    if isinstance(files, dict):
        files = [files[k] for k in sorted(files)]
    if len(files) < 2:
        raise ConfigInvalid("vote needs at least two prediction files")
    loaded = [read_predictions(rec.use(cfg.path(p))) for p in files]
    ids, patients, labels = loaded[0][0], loaded[0][1], loaded[0][2]
    for other in loaded[1:]:
        if other[0] != ids:
            raise LengthMismatch("prediction files cover different samples or orders")
    res = majority_vote([l[4] for l in loaded])
    frac = np.mean([l[4] for l in loaded], axis=0)
    rep = MetricReport(list(PRED_COLUMNS) + ["tie"])
    for i, s in enumerate(ids):
        rep.add(sample_id=s, patient_id=patients[i], label=int(labels[i]), prob_high=float(frac[i]),
                pred=int(res.labels[i]), tie=bool(res.ties[i]))
    name = sec.get("name", "vote")
    (out / f"{name}.csv").write_text(rep.to_csv())
    rec.made(out / f"{name}.csv")
    return rec.write()


# ------------------------------------------------------------ evaluate ----
def cmd_evaluate(cfg: RunConfig) -> Path:
    """Holdout metrics per model and paired bootstrap comparisons with significance tiers."""
    sec = cfg.section("evaluate")
    out = _out_dir(cfg, sec, "evaluate")
    rec = RunRecord("evaluate", out, {"seed": cfg.seed, "evaluate": sec})
    preds = {}
    sources = _require(sec, "predictions", "evaluate")
    if isinstance(sources, str):
        d = cfg.path(sources)
        if not d.is_dir():
            raise DataError(f"missing directory: {d}")
        sources = {p.stem: p for p in sorted(d.glob("*.csv"))}
    for name in sorted(sources):
        preds[name] = read_predictions(rec.use(cfg.path(sources[name])))
    if not preds:
        raise DataError("no prediction files to evaluate")
    names = sorted(preds)
    ref_ids, ref_labels = preds[names[0]][0], preds[names[0]][2]
    for n in names[1:]:
        if preds[n][0] != ref_ids or not np.array_equal(preds[n][2], ref_labels):
            raise LengthMismatch(f"{n} predictions are not aligned with {names[0]}")

    table = MetricReport(["model", "n", *METRICS, "f1_degenerate"])
    for n in names:
        m = compute_metrics(preds[n][3], preds[n][2])
        table.add(model=n, n=len(ref_ids), **m.as_dict(), f1_degenerate=m.f1_degenerate)
    rec.made(table.write(out / "metrics"))

    metric = sec.get("metric", "auc")
    ref = sec.get("reference")
    if ref is not None and ref not in preds:
        raise ConfigInvalid(f"reference model {ref!r} has no predictions")
    pairs = [(ref, n) for n in names if n != ref] if ref else list(combinations(names, 2))
    comp = MetricReport(["model_a", "model_b", "metric", "median_a", "median_b", "p_value",
                         "adjusted_p", "n_comparisons", "tier"])
    for a, b in pairs:
        res = bootstrap_compare(preds[a][3], preds[b][3], ref_labels, metric=metric,
                                iters=sec.get("iters", 50), frac=sec.get("frac", 0.8),
                                seed=cfg.seed, n_comparisons=max(1, len(pairs)), names=(a, b))
        comp.add(**res.row())
    comp.meta.update(iters=sec.get("iters", 50), frac=sec.get("frac", 0.8), seed=cfg.seed)
    rec.made(comp.write(out / "comparisons"))
    return rec.write()


# ----------------------------------------------------------- attention ----
def _attention_dir(cfg, rec, d):
    d = cfg.path(d)
    if not d.is_dir():
        raise DataError(f"missing directory: {d}")
    return {p.stem: lens.load_attention_csv(rec.use(p)) for p in sorted(d.glob("*.csv"))}


def cmd_attention(cfg: RunConfig) -> Path:
    """Region coverage per model and pairwise Dice of percentile masks, per slide."""
    sec = cfg.section("attention")
    out = _out_dir(cfg, sec, "attention")
    rec = RunRecord("attention", out, {"seed": cfg.seed, "attention": sec})
    maps = {m: _attention_dir(cfg, rec, d) for m, d in sorted(_require(sec, "maps", "attention").items())}
    models = sorted(maps)
    slides = sorted(set.intersection(*(set(v) for v in maps.values())))
    if not slides:
        raise DataError("attention directories share no slide files")
    cov_p = tuple(sec.get("coverage_percentiles", lens.COVERAGE_PERCENTILES))
    dice_p = tuple(sec.get("dice_percentiles", lens.DICE_PERCENTILES))

    if sec.get("regions"):
        rdir = cfg.path(sec["regions"])
        cov = MetricReport(["model", "slide_id", "percentile", "tumor", "benign"])
        for sid in slides:
            rpath = rdir / f"{sid}.csv"
            if not rpath.exists():
                continue
            regions = lens.load_regions_csv(rec.use(rpath))
            for m in models:
                for p in cov_p:
                    cov.add(model=m, slide_id=sid, percentile=p, **lens.region_coverage(maps[m][sid], regions, p))
        rec.made(cov.write(out / "coverage"))
        summary = MetricReport(["model", "percentile", "tumor", "benign"])
        for m in models:
            for p in cov_p:
                rows = [r for r in cov.rows if r["model"] == m and r["percentile"] == p]
                agg = {}
                for reg in ("tumor", "benign"):
                    vals = [r[reg] for r in rows if r[reg] is not None]
                    agg[reg] = float(np.mean(vals)) if vals else None
                summary.add(model=m, percentile=p, **agg)
        rec.made(summary.write(out / "coverage_summary"))

    if len(models) > 1:
        dice_rep = MetricReport(["slide_id", "map_a", "map_b", "percentile", "dice", "both_empty"])
        for sid in slides:
            per = lens.pairwise_dice({m: maps[m][sid] for m in models}, dice_p)
            for r in per.rows:
                dice_rep.add(slide_id=sid, **r)
        rec.made(dice_rep.write(out / "dice"))
        mean = MetricReport(["map_a", "map_b", "percentile", "mean_dice"])
        for a, b in combinations(models, 2):
            for p in dice_p:
                v = [r["dice"] for r in dice_rep.rows if (r["map_a"], r["map_b"], r["percentile"]) == (a, b, p)]
                mean.add(map_a=a, map_b=b, percentile=p, mean_dice=float(np.mean(v)))
        rec.made(mean.write(out / "dice_summary"))
    return rec.write()


# ------------------------------------------------------------- cluster ----
def cmd_cluster(cfg: RunConfig) -> Path:
    """t-SNE projection (or raw space) per feature set, cluster statistics and bootstrap comparisons."""
    sec = cfg.section("cluster")
    out = _out_dir(cfg, sec, "cluster")
    rec = RunRecord("cluster", out, {"seed": cfg.seed, "cluster": sec})
    ds = _load_dataset(cfg, rec, sec, "cluster")
    if not isinstance(ds, BagDataset):
        raise ConfigInvalid("cluster works on tile bags; give a bag manifest")
    encs = _encoders(ds, sec)
    sigs = _load_signatures(cfg, rec, sec)
    total = sum(s.n_tiles for s in ds.slides)
    tiles = subsample_tiles(ds, min(int(sec.get("n_tiles", 2000)), total), cfg.seed, encs)
    cat = np.hstack([tiles.matrices[e].values for e in encs])
    sets = sec.get("feature_sets") or list(encs) + (["concat"] if len(encs) > 1 else []) + sorted(sigs)
    space = sec.get("space", "tsne")
    if space not in ("tsne", "raw"):
        raise ConfigInvalid("cluster.space must be 'tsne' or 'raw'")
    ids = list(next(iter(tiles.matrices.values())).sample_ids)
    spaces = {}
    for name in sets:
        if name in encs:
            x = tiles.matrices[name].values
        elif name == "concat":
            x = cat
        elif name in sigs:
            x = apply_signature(cat, sigs[name])
        else:
            raise ConfigInvalid(f"unknown feature set {name!r}")
        if space == "tsne":
            res = tsne(x, perplexity=sec.get("perplexity", 30.0), iters=sec.get("iters", 1000), seed=cfg.seed)
            x = res.embedding
            proj = MetricReport(["sample_id", "x", "y"])
            for s, (a, b) in zip(ids, x):
                proj.add(sample_id=s, x=float(a), y=float(b))
            p = out / f"projection_{name}.csv"
            p.write_text(proj.to_csv())
            rec.made(p)
        spaces[name] = x
    stats = MetricReport(["feature_set", "silhouette", "compactness_0", "compactness_1"])
    for name, x in spaces.items():
        st = lens.cluster_stats(x, tiles.labels)
        stats.add(feature_set=name, silhouette=st["silhouette"],
                  **{f"compactness_{c}": v for c, v in st["compactness"].items()})
    stats.meta.update(space=space, n_tiles=len(ids))
    rec.made(stats.write(out / "cluster_stats"))
    if len(spaces) > 1:
        res = lens.clustering_bootstrap(spaces, tiles.labels, iters=sec.get("iters_bootstrap", 50),
                                        frac=sec.get("frac", 0.8), seed=cfg.seed)
        rec.made(lens.comparison_report(res).write(out / "cluster_comparisons"))
    return rec.write()


# ------------------------------------------------------------ pipeline ----
def cmd_pipeline(cfg: RunConfig) -> Path:
    """synth -> fuse -> train -> vote -> evaluate, each stage in its own subdirectory."""
    root = cfg.output_dir()
    root.mkdir(parents=True, exist_ok=True)
    # stage paths stay relative to the config directory so manifests do not depend on where the run lives
    rel = Path(os.path.relpath(root, cfg.base_dir))
    at = lambda *parts: rel.joinpath(*parts).as_posix()  # noqa: E731
    doc = json.loads(json.dumps(cfg.doc))
    stage = lambda name: doc.setdefault(name, {})  # noqa: E731
    stage("synth")["output_dir"] = at("synth")
    manifest = at("synth", "manifest.json")
    run = RunConfig(doc, cfg.base_dir)
    manifests = {"synth": cmd_synth(run)}
    stage("fuse").update(output_dir=at("fuse"), manifest=manifest)
    manifests["fuse"] = cmd_fuse(run)
    stage("train").update(output_dir=at("train"), manifest=manifest, signatures=at("fuse", "signatures"),
                          splits=at("fuse", "splits.json"))
    manifests["train"] = cmd_train(run)
    pred_dir = root / "train" / "predictions"
    encs = _encoders(load_manifest(run.path(manifest)), doc["train"])
    singles = [at("train", "predictions", f"{e}.csv") for e in encs if (pred_dir / f"{e}.csv").exists()]
    evaluate_preds = {p.stem: at("train", "predictions", p.name) for p in sorted(pred_dir.glob("*.csv"))}
    if len(singles) >= 2:
        stage("vote").update(output_dir=at("vote"), predictions=singles, name="vote")
        manifests["vote"] = cmd_vote(run)
        evaluate_preds["vote"] = at("vote", "vote.csv")
    ev = stage("evaluate")
    ev.update(output_dir=at("evaluate"), predictions=evaluate_preds)
    if "reference" not in ev:
        fused = sorted((k for k in evaluate_preds if k.startswith("fusion@")), key=lambda k: float(k.split("@")[1]))
        if fused:
            ev["reference"] = fused[0]
    manifests["evaluate"] = cmd_evaluate(run)

    rec = RunRecord("pipeline", root, {"seed": cfg.seed, **{k: v for k, v in cfg.doc.items() if k != "seed"}})
    for m in manifests.values():
        rec.made(m)
    rec.made(root / "evaluate" / "metrics.csv", root / "evaluate" / "comparisons.csv")
    return rec.write()


COMMANDS = {
    "synth": cmd_synth,
    "similarity": cmd_similarity,
    "fuse": cmd_fuse,
    "train": cmd_train,
    "vote": cmd_vote,
    "evaluate": cmd_evaluate,
    "attention": cmd_attention,
    "cluster": cmd_cluster,
    "pipeline": cmd_pipeline,
}
