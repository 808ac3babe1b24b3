import csv
import json
import math

import numpy as np

from oracles import brute_force_graph
from patientgraph import pipeline as P
from patientgraph.cli import main

SMALL = ["--n", "150"]
FAST = ["--epochs", "15", "--patience", "14", "--hidden", "16"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


def test_generate_rows_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    code, out, _ = run(capsys, "generate", "--n", 1000, "--seed", 7, "--out-dir", a)
    assert code == 0 and "1000 patients" in out
    assert run(capsys, "generate", "--n", 1000, "--seed", 7, "--out-dir", b)[0] == 0
    text = (a / "cohort.csv").read_text()
    assert len(text.splitlines()) == 1001
    assert (a / "cohort.csv").read_bytes() == (b / "cohort.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    run_ = manifest["runs"][-1]
    assert run_["command"] == "generate" and "cohort.csv" in run_["outputs"]
    assert set(run_["versions"]) >= {"patientgraph", "numpy", "scipy"}


def test_generate_too_small(tmp_path, capsys):
    code, _, err = run(capsys, "generate", "--n", 1, "--out-dir", tmp_path)
    assert code != 0
    doc = error_of(err)
    assert "n_patients" in doc["message"]


def test_encode_outputs(tmp_path, capsys):
    code, _, _ = run(capsys, "encode", *SMALL, "--out-dir", tmp_path)
    assert code == 0
    X = np.load(tmp_path / "features.npy")
    assert X.shape == (150, 133)
    splits = json.loads((tmp_path / "splits.json").read_text())
    assert sum(len(v) for v in splits.values()) == 150


def test_build_graph_on_generated_csv(tmp_path, capsys):
    assert run(capsys, "generate", "--n", 200, "--seed", 3, "--out-dir", tmp_path)[0] == 0
    cohort = tmp_path / "cohort.csv"
    code, out, _ = run(capsys, "build-graph", "--cohort", cohort, "--seed", 3, "--out-dir", tmp_path)
    assert code == 0
    side = json.loads((tmp_path / "graph.json").read_text())
    assert side["n_edges"] <= 1990
    assert f"{side['n_edges']} edges" in out
    with open(tmp_path / "edges.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == side["n_edges"]


def test_build_graph_alpha_one_is_cosine_only(tmp_path, capsys):
    code, _, _ = run(capsys, "build-graph", *SMALL, "--alpha", 1.0, "--out-dir", tmp_path)
    assert code == 0
    cfg = P.ExperimentConfig()
    cfg.cohort.n_patients = 150
    data = P.prepare(cfg)
    expected, _ = brute_force_graph(data.X, data.schema.n_continuous, 1.0, percentile=90)
    with open(tmp_path / "edges.csv") as fh:
        got = {(r["u"], r["v"]) for r in csv.DictReader(fh)}
    assert got == {(data.ids[i], data.ids[j]) for i, j in expected}


def test_build_graph_tau_override_zero(tmp_path, capsys):
    code, _, _ = run(capsys, "build-graph", "--n", 40, "--tau-override", 0, "--out-dir", tmp_path)
    assert code == 0
    assert json.loads((tmp_path / "graph.json").read_text())["n_edges"] == math.comb(40, 2)


def test_train_evaluate_roundtrip(tmp_path, capsys):
    code, out, _ = run(capsys, "train", *SMALL, *FAST, "--seed", 1, "--out-dir", tmp_path / "a")
    assert code == 0 and "train AUC" in out
    assert run(capsys, "train", *SMALL, *FAST, "--seed", 1, "--out-dir", tmp_path / "b")[0] == 0
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() == (tmp_path / "b" / "checkpoint.json").read_bytes()
    assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()

    code, out, _ = run(capsys, "evaluate", "--out-dir", tmp_path / "a")
    assert code == 0
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    for key in ("auc_roc", "accuracy", "precision", "recall", "f1", "confusion", "spearman_rho"):
        assert key in metrics
    c = metrics["confusion"]
    assert c["tp"] + c["fp"] + c["tn"] + c["fn"] == metrics["n_evaluated"]
    assert (tmp_path / "a" / "roc.csv").read_text().startswith("fpr,tpr\n")

    att = json.loads((tmp_path / "a" / "attention.json").read_text())
    sums = {}
    for e in att["edges"]:
        sums[e["dst"]] = sums.get(e["dst"], 0.0) + e["mean"]
    assert len(sums) == 150
    assert max(abs(s - 1.0) for s in sums.values()) < 1e-9


def test_evaluate_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--checkpoint", tmp_path / "none.json", "--out-dir", tmp_path)
    assert code == 2
    assert error_of(err)["error"] == "not_found"


def test_train_divergence(tmp_path, capsys):
    code, _, err = run(capsys, "train", *SMALL, "--lr", 10.0, "--epochs", 200, "--patience", 199,
                       "--hidden", 16, "--out-dir", tmp_path)
    assert code == 3
    doc = error_of(err)
    assert doc["error"] == "diverged" and doc["epoch"] >= 1
    assert not (tmp_path / "checkpoint.json").exists()


def test_config_file_and_unknown_keys(tmp_path, capsys):
    cfg = P.ExperimentConfig()
    cfg.cohort.n_patients = 60
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    code, out, _ = run(capsys, "generate", "--config", path, "--out-dir", tmp_path)
    assert code == 0 and "60 patients" in out
    loaded = P.ExperimentConfig.load(path)
    assert loaded.hash() == cfg.hash()

    path.write_text(json.dumps({"cohort": {"n_patients": 60}, "bogus": 1}))
    code, _, err = run(capsys, "generate", "--config", path, "--out-dir", tmp_path)
    assert code == 2 and "bogus" in error_of(err)["message"]


def test_seed_sets_all_streams():
    cfg = P.ExperimentConfig().with_seed(11)
    assert cfg.cohort.seed == cfg.model.seed == cfg.train["seed"] == 11


def test_ablate_single_seed(tmp_path, capsys):
    code, out, _ = run(capsys, "ablate", "--n", 120, "--seeds", 1, *FAST, "--epochs", 5, "--patience", 4,
                       "--out-dir", tmp_path)
    assert code == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert [r["study"] for r in rows].count("graph") == 4
    assert all(float(r["auc_std"]) == 0.0 and float(r["f1_std"]) == 0.0 for r in rows)
    hashes = {r["variant"]: r["config_hash"] for r in rows}
    assert hashes["hybrid_similarity"] == hashes["hybrid_stack"]
    assert len(set(hashes.values())) == 7
    checks = json.loads((tmp_path / "ordering.json").read_text())
    assert len(checks) == 5


def test_ablation_cells_layout():
    cells = P.ablation_cells(P.ExperimentConfig())
    assert [c.variant for c in cells] == ["no_graph_mlp", "cosine_only", "jaccard_only", "hybrid_similarity",
                                          "gcn_only", "sage_only", "gat_only", "hybrid_stack"]
    assert cells[0].graph == "none"
