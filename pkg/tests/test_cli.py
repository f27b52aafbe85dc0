import csv
import json

import numpy as np
import pytest

from radarseq import cli
from radarseq.autodiff import load_checkpoint
from radarseq.domain import CHURN_HORIZON, make_splits, read_events_csv
from radarseq.synth import read_ground_truth
from radarseq.trainer import TrainingDiverged
from radarseq.window import enumerate_windows, load_dataset, save_dataset

TINY_INI = """
[model]
filters = 4, 8, 16, 32
embedding_dim = 32
hidden_size = 8
[train]
learning_rate = 0.002
max_epochs = 2
early_stop_patience = 1
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 60, "--seed", 3, "--out", root / "s") == 0
    assert run("prepare", "--events", root / "s" / "events.csv", "--split-seed", 3, "--out", root / "p") == 0
    (root / "tiny.ini").write_text(TINY_INI)
    return root


def _hashes(d):
    return json.loads((d / "manifest.json").read_text())["outputs"]


def test_synth_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--n", 100, "--seed", 7, "--out", tmp_path / name) == 0
    a, b = _hashes(tmp_path / "a"), _hashes(tmp_path / "b")
    assert a == b and set(a) == {"events.csv", "ground_truth.csv"}
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 7 and man["config"]["synth"]["n_couriers"] == 100


def test_churn_frac_zero(tmp_path):
    assert run("synth", "--n", 30, "--churn-frac", 0, "--out", tmp_path) == 0
    assert all(v is None for v in read_ground_truth(tmp_path / "ground_truth.csv").values())


def test_prepare_window_counts_and_splits(prepared, tmp_path):
    timelines = read_events_csv(prepared / "s" / "events.csv")
    end = max(tl.last_date for tl in timelines)
    splits = make_splits([tl.courier_id for tl in timelines], 3)
    with open(prepared / "p" / "dataset.bin.index.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    counts = {}
    for r in rows:
        counts[r["courier_id"]] = counts.get(r["courier_id"], 0) + 1
        assert r["split"] == splits[r["courier_id"]]
    for tl in timelines:
        L = int((end - tl.first_date).astype(int)) + 1
        stride = 1 if splits[tl.courier_id] == "test" else 5
        expect = sum(1 for _, e in enumerate_windows(L, 50, stride)
                     if tl.first_date + e + CHURN_HORIZON <= end)
        assert counts.get(tl.courier_id, 0) == expect, tl.courier_id
    # rerun: identical dataset
    assert run("prepare", "--events", prepared / "s" / "events.csv", "--split-seed", 3, "--out", tmp_path) == 0
    assert _hashes(tmp_path) == _hashes(prepared / "p")


def test_train_eval_and_explain(prepared, tmp_path, capsys):
    ds = prepared / "p" / "dataset.bin"
    assert run("train", "--dataset", ds, "--config", prepared / "tiny.ini", "--out", tmp_path / "t") == 0
    out = tmp_path / "t"
    for name in ("checkpoint.rsck", "metrics_val.csv", "metrics_test.csv", "history.csv", "manifest.json"):
        assert (out / name).exists(), name
    _, meta = load_checkpoint(out / "checkpoint.rsck")
    assert meta["model"]["hidden_size"] == 8 and meta["best_epoch"] in (1, 2)
    capsys.readouterr()
    assert run("eval", "--checkpoint", out / "checkpoint.rsck", "--dataset", ds, "--split", "val") == 0
    assert capsys.readouterr().out.startswith("val: n=")

    ex = tmp_path / "x"
    assert run("explain", "--checkpoint", out / "checkpoint.rsck", "--dataset", ds, "--repeats", 2,
               "--cams", 1, "--out", ex) == 0
    with open(ex / "importance.csv", newline="") as fh:
        feats = [r["feature"] for r in csv.DictReader(fh)]
    assert len(feats) == 15 and feats[-1] == "all"
    assert len(list((ex / "cams").glob("*.pgm"))) == 50
    assert (ex / "projection.csv").exists()


def test_ablate_table_schema(prepared, tmp_path):
    assert run("ablate", "--dataset", prepared / "p" / "dataset.bin", "--config", prepared / "tiny.ini",
               "--out", tmp_path) == 0
    with open(tmp_path / "ablation.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["model", "F1", "Precision", "Recall", "ROC-AUC", "MCC"]
    assert [r[0] for r in rows[1:]] == ["CNN+LSTM", "CNN-only", "CNN+MLP", "raw-LSTM"]


def test_exit_codes(prepared, tmp_path, monkeypatch):
    assert run("train") == 1                                          # missing required flags
    assert run("--workers", 0, "synth", "--out", tmp_path) == 1
    assert run("synth", "--n", 0, "--out", tmp_path) == 1             # invalid setting
    bad = tmp_path / "bad.csv"
    bad.write_text("courier_id,date\nc1,2024-01-01\n")
    assert run("prepare", "--events", bad, "--out", tmp_path / "p") == 2
    assert run("eval", "--checkpoint", tmp_path / "missing.rsck", "--dataset", bad) == 2
    (tmp_path / "x.ini").write_text("[model]\nwidth = 3\n")
    assert run("train", "--dataset", prepared / "p" / "dataset.bin", "--config", tmp_path / "x.ini",
               "--out", tmp_path / "t") == 1

    def diverge(model, *a, **k):
        state = model.state_dict()
        raise TrainingDiverged("loss became nan at epoch 2", state, 2)

    monkeypatch.setattr(cli, "train", diverge)
    out = tmp_path / "nan"
    assert run("train", "--dataset", prepared / "p" / "dataset.bin", "--config", prepared / "tiny.ini",
               "--out", out) == 3
    _, meta = load_checkpoint(out / "checkpoint.rsck")           # last good parameters kept
    assert meta["diverged_at_epoch"] == 2 and (out / "manifest.json").exists()


def test_workers_env_fallback(monkeypatch):
    monkeypatch.setenv("RADARSEQ_WORKERS", "3")
    assert cli._workers_default() == 3
    monkeypatch.setenv("RADARSEQ_WORKERS", "junk")
    assert cli._workers_default() == 1


def test_pipeline_replay_from_manifest(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[run]\nseed = 5\n[synth]\nn_couriers = 40\n" + TINY_INI.replace("max_epochs = 2", "max_epochs = 1"))
    assert run("pipeline", "--config", ini, "--out", tmp_path / "a") == 0
    assert run("pipeline", "--manifest", tmp_path / "a" / "manifest.json", "--out", tmp_path / "b") == 0
    a, b = (json.loads((tmp_path / d / "manifest.json").read_text()) for d in "ab")
    assert a["manifest_hash"] == b["manifest_hash"] and a["outputs"] == b["outputs"]
    assert {"dataset.bin", "checkpoint.rsck", "metrics_test.csv"} <= set(a["outputs"])
    assert run("pipeline", "--out", tmp_path / "c") == 1


def test_memorization_run(prepared, tmp_path):
    """Twenty training windows, 200 epochs: the model should fit them."""
    full = load_dataset(prepared / "p" / "dataset.bin")
    tr = np.flatnonzero(full.splits == "train")
    pos, neg = tr[full.labels[tr] == 1][:10], tr[full.labels[tr] == 0][::37][:10]
    assert len(pos) == 10 and len(neg) == 10
    keep = np.zeros(len(full), bool)
    keep[np.concatenate([pos, neg])] = True
    va = np.flatnonzero(full.splits == "val")
    keep[np.concatenate([va[full.labels[va] == 1][:4], va[full.labels[va] == 0][:4]])] = True
    small = full.subset(keep)
    save_dataset(tmp_path / "small.bin", small)
    (tmp_path / "mem.ini").write_text(
        "[model]\nfilters = 4, 8, 16, 32\nembedding_dim = 32\nhidden_size = 8\n"
        "[train]\nlearning_rate = 0.005\nmax_epochs = 200\nearly_stop_patience = 199\n"
        "physical_batch = 20\naccumulation_steps = 1\neval_test_each_epoch = false\nrestore_best = false\n")
    assert run("train", "--dataset", tmp_path / "small.bin", "--config", tmp_path / "mem.ini",
               "--out", tmp_path / "t") == 0
    assert run("eval", "--checkpoint", tmp_path / "t" / "checkpoint.rsck", "--dataset", tmp_path / "small.bin",
               "--split", "train", "--out", tmp_path / "e") == 0
    with open(tmp_path / "e" / "metrics_train.csv", newline="") as fh:
        row = next(csv.DictReader(fh))
    assert float(row["f1"]) > 0.95
