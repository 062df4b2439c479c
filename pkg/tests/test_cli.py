import csv
import json

import numpy as np
import pytest

from fmfusion.cli import main
from fmfusion.evalkit import compute_metrics
from fmfusion.runconfig import parse_override
from fmfusion.store import EmbeddingMatrix, write_embedding_binary, write_embedding_csv

SLIDE_GEN = {"n_samples": 160, "shared_dim": 4, "unique_dims": [2, 2], "output_dims": [12, 12], "noise_scale": 0.4,
             "mixing": "sparse", "shared_weights": [0, 0, 0, 0], "unique_weights": [[1.5, 0], [1.5, 0]],
             "encoder_ids": ["encA", "encB"]}


def pipeline_config(tmp_path, **extra):
    doc = {"seed": 3, "output_dir": "out", "synth": {"generator": SLIDE_GEN},
           "splits": {"k": 2, "holdout_frac": 0.25, "val_frac": 0.2},
           "fuse": {"thetas": [0.2, 0.5]},
           "train": {"model": "mlp", "arch": {"widths": [16]}, "config": {"max_epochs": 25, "patience": 8}},
           "evaluate": {"iters": 20}}
    doc.update(extra)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


def manifest_hashes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("run_manifest.json"))}


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def two_encoders(tmp_path):
    rng = np.random.default_rng(0)
    ids = [f"t{i}" for i in range(120)]
    a = rng.normal(size=(120, 8))
    write_embedding_csv(EmbeddingMatrix("a", ids, a), tmp_path / "a.csv")
    write_embedding_binary(EmbeddingMatrix("b", ids, a @ rng.normal(size=(8, 6))), tmp_path / "b.embg")
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"seed": 1, "similarity": {"embeddings": {"a": "a.csv", "b": "b.embg"},
                                                          "output_dir": "sim"}}))
    return cfg


def test_similarity_two_encoders_one_row(two_encoders, tmp_path):
    assert main(["similarity", "--config", str(two_encoders)]) == 0
    rows = read_rows(tmp_path / "sim" / "similarity.csv")
    assert len(rows) == 1 and (rows[0]["encoder_a"], rows[0]["encoder_b"]) == ("a", "b")
    man = json.loads((tmp_path / "sim" / "run_manifest.json").read_text())
    assert set(man["outputs"]) == {"similarity.csv", "similarity.json"}
    assert len(man["inputs"]) == 2


def test_similarity_rerun_is_bitwise_identical(two_encoders, tmp_path):
    main(["similarity", "--config", str(two_encoders)])
    first = (tmp_path / "sim" / "similarity.json").read_bytes(), (tmp_path / "sim" / "run_manifest.json").read_bytes()
    main(["similarity", "--config", str(two_encoders)])
    again = (tmp_path / "sim" / "similarity.json").read_bytes(), (tmp_path / "sim" / "run_manifest.json").read_bytes()
    assert first == again


def test_missing_file_exit_3_names_path(two_encoders, capsys):
    code = main(["similarity", "--config", str(two_encoders), "--set", "similarity.embeddings.b=gone.embg"])
    assert code == 3
    assert "gone.embg" in capsys.readouterr().err


@pytest.mark.parametrize("args", [
    ["--set", "seed=-2"],
    ["--set", "seed=\"x\""],
    ["--set", "similarity.metric.knn_k=0"],
])
def test_config_errors_exit_2(two_encoders, args):
    assert main(["similarity", "--config", str(two_encoders), *args]) == 2


def test_missing_seed_and_bad_json(tmp_path):
    (tmp_path / "c.json").write_text('{"similarity": {}}')
    assert main(["similarity", "--config", str(tmp_path / "c.json")]) == 2
    (tmp_path / "d.json").write_text("{nope")
    assert main(["similarity", "--config", str(tmp_path / "d.json")]) == 2
    assert main(["similarity", "--config", str(tmp_path / "absent.json")]) == 3


def test_override_parsing():
    assert parse_override("a.b=3") == (["a", "b"], 3)
    assert parse_override("a=[0.1, 0.2]") == (["a"], [0.1, 0.2])
    assert parse_override("name=encA") == (["name"], "encA")


def write_preds(path, labels, preds):
    with open(path, "w") as fh:
        fh.write("sample_id,patient_id,label,prob_high,pred\n")
        for i, (y, p) in enumerate(zip(labels, preds)):
            fh.write(f"s{i},p{i},{y},{0.9 if p else 0.1},{p}\n")


def test_vote_five_files(tmp_path):
    rng = np.random.default_rng(2)
    y = rng.integers(0, 2, 30)
    preds = [rng.integers(0, 2, 30) for _ in range(5)]
    for i, p in enumerate(preds):
        write_preds(tmp_path / f"m{i}.csv", y, p)
    cfg = tmp_path / "v.json"
    cfg.write_text(json.dumps({"seed": 0, "vote": {"predictions": [f"m{i}.csv" for i in range(5)],
                                                    "output_dir": "vote"}}))
    assert main(["vote", "--config", str(cfg)]) == 0
    out = sorted(p.name for p in (tmp_path / "vote").iterdir())
    assert out == ["run_manifest.json", "vote.csv"]
    rows = read_rows(tmp_path / "vote" / "vote.csv")
    expect = (np.sum(preds, axis=0) >= 3).astype(int)
    assert [int(r["pred"]) for r in rows] == expect.tolist()
    assert [float(r["prob_high"]) for r in rows] == (np.sum(preds, axis=0) / 5).tolist()


def test_vote_misaligned_files_exit_3(tmp_path):
    write_preds(tmp_path / "a.csv", [0, 1], [0, 1])
    write_preds(tmp_path / "b.csv", [0, 1, 1], [0, 1, 1])
    cfg = tmp_path / "v.json"
    cfg.write_text(json.dumps({"seed": 0, "vote": {"predictions": ["a.csv", "b.csv"]}}))
    assert main(["vote", "--config", str(cfg)]) == 3


def test_evaluate_emits_tiers(tmp_path):
    rng = np.random.default_rng(4)
    y = np.r_[np.zeros(40, int), np.ones(40, int)]
    good = np.clip(y + rng.normal(0, 0.2, 80), 0, 1)
    bad = rng.random(80)
    for name, p in (("fusion", good), ("concat", bad)):
        with open(tmp_path / f"{name}.csv", "w") as fh:
            fh.write("sample_id,label,prob_high\n")
            for i, (lab, q) in enumerate(zip(y, p)):
                fh.write(f"s{i},{lab},{float(q)!r}\n")
    cfg = tmp_path / "e.json"
    cfg.write_text(json.dumps({"seed": 9, "evaluate": {"predictions": {"fusion": "fusion.csv", "concat": "concat.csv"},
                                                        "reference": "fusion", "output_dir": "ev"}}))
    assert main(["evaluate", "--config", str(cfg)]) == 0
    metrics = {r["model"]: r for r in read_rows(tmp_path / "ev" / "metrics.csv")}
    assert float(metrics["fusion"]["auc"]) == compute_metrics(good, y).auc
    comp = read_rows(tmp_path / "ev" / "comparisons.csv")
    assert len(comp) == 1 and comp[0]["model_a"] == "fusion" and comp[0]["tier"] == "***"


@pytest.mark.slow
def test_pipeline_smoke_and_hash_stable(tmp_path):
    cfg = pipeline_config(tmp_path)
    assert main(["pipeline", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    models = {r["model"] for r in read_rows(out / "evaluate" / "metrics.csv")}
    assert models == {"encA", "encB", "concat", "vote", "fusion@0.2", "fusion@0.5"}
    first = manifest_hashes(out)
    assert set(first) == {"run_manifest.json", *(f"{s}/run_manifest.json" for s in
                                                  ("synth", "fuse", "train", "vote", "evaluate"))}
    top = json.loads((out / "run_manifest.json").read_text())
    assert "evaluate/metrics.csv" in top["outputs"]
    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert manifest_hashes(out) == first


def test_bag_commands_chain(tmp_path):
    gen = {"n_samples": 16, "shared_dim": 3, "unique_dims": [1, 1], "output_dims": [8, 8], "noise_scale": 0.1,
           "shared_weights": [1, 0, 0], "unique_weights": [[0], [0]], "encoder_ids": ["a", "b"],
           "bag_mode": {"tiles_per_bag": 10, "signal_fraction": 0.3, "margin": 0.5}}
    doc = {"seed": 2,
           "synth": {"output_dir": "s", "generator": gen, "format": "csv"},
           "splits": {"k": 2, "holdout_frac": 0.25, "val_frac": 0.25},
           "train": {"manifest": "s/manifest.json", "output_dir": "t", "arch": {"hidden": 8, "attn_dim": 4},
                     "config": {"max_epochs": 3}},
           "attention": {"output_dir": "a", "maps": {"a": "t/attention/a", "b": "t/attention/b"}, "regions": "s/regions"},
           "cluster": {"manifest": "s/manifest.json", "output_dir": "c", "space": "raw", "n_tiles": 60,
                       "iters_bootstrap": 5}}
    cfg = tmp_path / "bag.json"
    cfg.write_text(json.dumps(doc))
    for cmd in ("synth", "train", "attention", "cluster"):
        assert main([cmd, "--config", str(cfg)]) == 0, cmd
    assert len(list((tmp_path / "t" / "attention" / "a").glob("*.csv"))) == 4
    cov = read_rows(tmp_path / "a" / "coverage_summary.csv")
    assert {r["percentile"] for r in cov} == {"25", "50", "60", "70", "80", "90"}
    assert (tmp_path / "a" / "dice.csv").exists()
    stats = read_rows(tmp_path / "c" / "cluster_stats.csv")
    assert [r["feature_set"] for r in stats] == ["a", "b", "concat"]
    assert main(["cluster", "--config", str(cfg), "--set", "cluster.space=\"umap\""]) == 2


def test_mil_on_slide_vectors_is_config_error(tmp_path):
    cfg = pipeline_config(tmp_path)
    assert main(["synth", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--set", "train.model=mil",
                 "--set", "train.manifest=out/synth/manifest.json"]) == 2
