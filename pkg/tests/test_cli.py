"""End-to-end CLI behavior on a miniature dataset."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from patchebm.cli import main

TINY_CONFIG = {
    "synth": {
        "volume_shape": [8, 8, 8],
        "patch_shape": [4, 4, 4],
        "signal_patches": [0, 7],
        "effect_size": 0.5,
        "noise_sigma": 0.1,
        "subjects_per_class": [30, 30],
    },
    "train": {
        "n_max": 2,
        "n_tolerate": 1,
        "warmup_epochs": 1,
        "batch_size": 16,
        "ebm": {"max_rounds": 60, "bag_count": 2},
    },
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY_CONFIG))
    assert main(["synth", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == 0
    assert main(["train", "--manifest", str(root / "data/manifest.csv"), "--config", str(cfg),
                 "--seed", "0", "--task", "demo", "--out", str(root / "run")]) == 0
    return root, cfg


class TestSynthAndSplit:
    def test_synth_writes_volumes_and_manifest(self, workspace):
        root, _ = workspace
        assert (root / "data/manifest.csv").exists()
        assert len(list((root / "data").glob("*.vol"))) == 60

    def test_split_writes_three_manifests(self, workspace):
        root, cfg = workspace
        assert main(["split", "--manifest", str(root / "data/manifest.csv"),
                     "--out", str(root / "splits"), "--seed", "1"]) == 0
        sizes = {}
        for name in ("train", "valid", "test"):
            lines = (root / "splits" / f"{name}.csv").read_text().strip().splitlines()
            sizes[name] = len(lines) - 1
        assert sizes == {"train": 48, "valid": 6, "test": 6}

    def test_same_seed_reproduces_dataset(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["synth", "--config", str(cfg), "--out", str(tmp_path / "data2"),
                     "--seed", "3"]) == 0
        a = (root / "data/s0000.vol").read_bytes()
        b = (tmp_path / "data2/s0000.vol").read_bytes()
        assert a == b


class TestTrainCommand:
    def test_outputs_exist(self, workspace):
        root, _ = workspace
        for name in ("model.glic", "history.json", "train.csv", "valid.csv", "test.csv"):
            assert (root / "run" / name).exists()

    def test_history_is_consistent(self, workspace):
        root, _ = workspace
        history = json.loads((root / "run/history.json").read_text())
        assert history["task"] == "demo"
        assert history["best_loss"] == min(history["losses"])
        assert 1 <= history["best_epoch"] <= history["stop_epoch"]

    def test_deterministic_given_seed(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["train", "--manifest", str(root / "data/manifest.csv"), "--config", str(cfg),
                     "--seed", "0", "--task", "demo", "--out", str(tmp_path / "run2")]) == 0
        h1 = hashlib.sha256((root / "run/model.glic").read_bytes()).hexdigest()
        h2 = hashlib.sha256((tmp_path / "run2/model.glic").read_bytes()).hexdigest()
        assert h1 == h2

    def test_finetune_from_checkpoint(self, workspace, tmp_path):
        root, cfg = workspace
        assert main(["train", "--manifest", str(root / "data/manifest.csv"), "--config", str(cfg),
                     "--seed", "0", "--from-checkpoint", str(root / "run/model.glic"),
                     "--out", str(tmp_path / "tuned")]) == 0
        assert (tmp_path / "tuned/model.glic").exists()


class TestEvaluateCommand:
    def test_reports_and_figure(self, workspace):
        root, _ = workspace
        assert main(["evaluate", "--manifest", str(root / "run/test.csv"),
                     "--from-checkpoint", str(root / "run/model.glic"),
                     "--out", str(root / "eval")]) == 0
        for name in ("report.json", "report.csv", "scores.csv", "roc.png"):
            assert (root / "eval" / name).exists()
        payload = json.loads((root / "eval/report.json").read_text())
        model = payload["models"][0]
        assert model["ci_low"] <= model["auc"] <= model["ci_high"]


class TestExplainCommand:
    def test_group_mode(self, workspace):
        root, _ = workspace
        assert main(["explain", "--manifest", str(root / "run/train.csv"),
                     "--from-checkpoint", str(root / "run/model.glic"),
                     "--group", "--top-k", "5", "--out", str(root / "expl")]) == 0
        payload = json.loads((root / "expl/group_importance.json").read_text())
        assert len(payload["features"]) == 5
        values = [f["importance"] for f in payload["features"]]
        assert values == sorted(values, reverse=True)
        for f in payload["features"]:
            assert f["ci_low"] <= f["importance"] + 1e-12
            assert f["importance"] <= f["ci_high"] + 1e-12
        assert (root / "expl/group_importance.png").exists()

    def test_individual_mode_decomposes_exactly(self, workspace):
        root, _ = workspace
        sid = (root / "run/test.csv").read_text().strip().splitlines()[1].split(",")[0]
        assert main(["explain", "--manifest", str(root / "run/test.csv"),
                     "--from-checkpoint", str(root / "run/model.glic"),
                     "--subject", sid, "--out", str(root / "expl_i")]) == 0
        payload = json.loads((root / "expl_i/individual_importance.json").read_text())
        total = payload["intercept"] + sum(payload["contributions"].values())
        assert total == pytest.approx(payload["logit"], abs=1e-9)
        assert payload["predicted_label"] in (0, 1)
        assert payload["reference_label"] in (0, 1)
        assert 0.0 <= payload["probability"] <= 1.0
        assert (root / "expl_i/individual_importance.png").exists()

    def test_unknown_subject_fails_cleanly(self, workspace, capsys):
        root, _ = workspace
        code = main(["explain", "--manifest", str(root / "run/test.csv"),
                     "--from-checkpoint", str(root / "run/model.glic"),
                     "--subject", "nope", "--out", str(root / "x")])
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        payload = json.loads(err)
        assert payload["error"] == "KeyError"

    def test_requires_exactly_one_mode(self, workspace):
        root, _ = workspace
        assert main(["explain", "--manifest", str(root / "run/test.csv"),
                     "--from-checkpoint", str(root / "run/model.glic"),
                     "--out", str(root / "x")]) == 1


class TestErrorsAndConfig:
    def test_missing_manifest_is_machine_readable(self, workspace, capsys):
        root, _ = workspace
        code = main(["evaluate", "--manifest", str(root / "missing.csv"),
                     "--from-checkpoint", str(root / "run/model.glic"),
                     "--out", str(root / "x")])
        assert code == 1
        err = capsys.readouterr().err.strip().splitlines()[-1]
        payload = json.loads(err)
        assert payload["error"] == "FileNotFoundError"

    def test_print_config(self, workspace, capsys):
        _, cfg = workspace
        assert main(["train", "--config", str(cfg), "--print-config"]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["n_max"] == 2
        assert payload["ebm"]["max_rounds"] == 60

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"train": {"learning_rat": 1.0}}))
        assert main(["train", "--config", str(cfg), "--print-config"]) == 1
        payload = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert "unknown" in payload["message"]


class TestCompareCommand:
    def test_compare_produces_ranked_report(self, workspace):
        root, cfg = workspace
        assert main(["compare", "--manifest", str(root / "data/manifest.csv"),
                     "--config", str(cfg), "--seed", "0", "--task", "demo",
                     "--out", str(root / "cmp")]) == 0
        payload = json.loads((root / "cmp/comparison.json").read_text())
        names = {m["name"] for m in payload["models"]}
        assert names == {"cnn_ebm", "cnn_mlp", "cnn_linear", "patchmean_ebm"}
        aucs = [m["auc"] for m in payload["models"]]
        assert aucs == sorted(aucs, reverse=True)
        n_pairs = len(payload["pairwise_delong"])
        assert n_pairs == 6
        assert (root / "cmp/auc_comparison.png").exists()
        assert (root / "cmp/comparison.csv").exists()
