import csv
import json

import numpy as np
import pytest

from stgt.cli import main
from stgt.model import load_checkpoint

FAST = {
    "model": {"d": 16, "heads": 2, "n_blocks": 1, "ff_mult": 2, "static_hidden": 16, "head_hidden": [16, 8]},
    "train": {"max_epochs": 2, "patience": 1},
    "features": {"select_iters": 5, "select_trees": 5},
    "eval": {"boot_iters": 50},
}

STEPS = ["synth", "ingest", "graph", "featurize", "select", "train-stgt", "train-gbt", "evaluate", "predict"]


def run_chain(tmp, seed=5):
    tmp.mkdir(parents=True, exist_ok=True)
    cfg = tmp / "fast.json"
    cfg.write_text(json.dumps(FAST))
    for step in STEPS:
        assert main([step, "--config", str(cfg), "--seed", str(seed), "--out", str(tmp)]) == 0, step
    return tmp


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    return run_chain(tmp_path_factory.mktemp("run"))


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_every_stage_writes_its_outputs(chain):
    for name in ("events.csv", "coords.csv", "daily.csv", "ingest_report.json", "edges.csv",
                 "node_features.csv", "disturbances.csv", "static_features.csv", "samples.csv",
                 "scalers.npz", "feature_importance.csv", "selected_features.json", "stgt_model.npz",
                 "predictions_stgt.csv", "history_stgt.json", "attention_spatial.csv",
                 "attention_temporal.csv", "gbt_model.json", "predictions_gbt.csv", "metrics.json",
                 "metrics.csv", "next_day_predictions.csv", "config_evaluate.json"):
        assert (chain / name).exists(), name


def test_metrics_cover_both_models(chain):
    data = json.loads((chain / "metrics.json").read_text())
    assert set(data["reports"]) == {"stgt", "gbt"}
    for rep in data["reports"].values():
        assert 0.01 <= rep["threshold"] <= 0.99
        for m, (lo, hi) in rep["ci"].items():
            assert lo <= rep["values"][m] <= hi
    rows = read_csv(chain / "metrics.csv")
    assert {r["model"] for r in rows} == {"stgt", "gbt"}


def test_predictions_are_real_rows_with_probabilities(chain):
    rows = read_csv(chain / "predictions_stgt.csv")
    assert {r["split"] for r in rows} == {"val", "test"}
    probs = np.array([float(r["probability"]) for r in rows])
    assert np.all((probs > 0) & (probs < 1))
    assert all(r["synthetic"] == "0" for r in rows)


def test_next_day_forecast_covers_every_substation(chain):
    rows = read_csv(chain / "next_day_predictions.csv")
    ids = json.loads((chain / "ingest_report.json").read_text())["retained"]
    assert sorted(r["substation_id"] for r in rows) == ids
    assert {r["target_date"] for r in rows} == {"2023-01-01"}
    ckpt = load_checkpoint(chain / "stgt_model.npz")
    thr = ckpt[2]["threshold"]
    for r in rows:
        assert (float(r["probability"]) >= thr) == (r["alert"] == "1")


def test_same_seed_gives_identical_synthetic_data(tmp_path, chain):
    assert main(["synth", "--seed", "5", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "events.csv").read_bytes() == (chain / "events.csv").read_bytes()


def test_missing_inputs_and_bad_config_fail_cleanly(tmp_path, capsys):
    assert main(["train-gbt", "--out", str(tmp_path)]) == 1
    assert "not found" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text('{"train": {"nope": 1}}')
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 1
