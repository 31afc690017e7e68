"""CLI subcommands: exit codes, run manifests, and the full pipeline chain."""

import json
import subprocess
import sys

import numpy as np
import pytest

from satfusion import cli
from satfusion.ensemble import read_predictions_jsonl
from satfusion.evaluation import read_labels_csv
from satfusion.features import read_features_csv
from satfusion.image import Raster, write_raster
from satfusion.metadata import FALSE_DETECTION_INDEX, BoundingBox, default_registry

from conftest import PINNED_ENV, make_metadata


def run(argv, expect=0, capsys=None):
    code = cli.main(argv)
    if capsys is not None and code != expect:
        captured = capsys.readouterr()
        raise AssertionError(f"exit {code} != {expect}; stderr: {captured.err}")
    assert code == expect
    return code


def synth_config(tmp_path, **overrides):
    cfg = {
        "n_records": 60,
        "n_models": 2,
        "label_noise_rate": 0.2,
        "sequence_fraction": 0.4,
        "seed": 21,
    }
    cfg.update(overrides)
    path = tmp_path / "synth_config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def dataset_dir(tmp_path):
    config = synth_config(tmp_path)
    out = tmp_path / "data"
    assert cli.main(["synth", "--config", str(config), "--out-dir", str(out)]) == 0
    return out


# -------------------------------------------------------------------- synth

def test_synth_writes_dataset_and_manifest(dataset_dir, capsys):
    assert (dataset_dir / "metadata.jsonl").exists()
    assert (dataset_dir / "labels.csv").exists()
    assert (dataset_dir / "predictions_model_0.jsonl").exists()
    assert (dataset_dir / "predictions_model_1.jsonl").exists()
    assert (dataset_dir / "manifest.json").exists()
    run_manifest = json.loads((dataset_dir / "run_manifest.json").read_text())
    assert run_manifest["subcommand"] == "synth"
    assert run_manifest["seed"] == 21
    assert run_manifest["duration_s"] >= 0
    assert any(p.endswith("labels.csv") for p in run_manifest["outputs"])


def test_synth_seed_override(tmp_path):
    config = synth_config(tmp_path)
    out = tmp_path / "data99"
    run(["synth", "--config", str(config), "--out-dir", str(out), "--seed", "99"])
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 99
    assert manifest["config"]["seed"] == 99


def test_synth_bad_config_is_data_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    run(["synth", "--config", str(bad), "--out-dir", str(tmp_path / "x")], expect=2)
    assert "error:" in capsys.readouterr().err


# ------------------------------------------------------------------- extract

def test_extract_features(dataset_dir, tmp_path, capsys):
    out = tmp_path / "features.csv"
    run(["extract", "--metadata", str(dataset_dir / "metadata.jsonl"), "--out", str(out)],
        capsys=capsys)
    ids, F = read_features_csv(out)
    assert len(ids) == 60
    assert F.shape == (60, 27)
    assert np.all(F >= -1.0) and np.all(F <= 1.0)
    manifest = json.loads((tmp_path / "features.csv.run.json").read_text())
    assert manifest["subcommand"] == "extract"
    assert manifest["config"]["written"] == 60


def test_extract_nonstrict_skips_bad_lines(tmp_path, capsys):
    meta = tmp_path / "meta.jsonl"
    bad_cloud = json.loads(make_metadata(image_id="bad").to_json())
    bad_cloud["cloud_cover_pct"] = 101.0
    meta.write_text(
        make_metadata(image_id="ok_1").to_json() + "\n"
        + "{broken\n"
        + json.dumps(bad_cloud) + "\n"
        + make_metadata(image_id="ok_2").to_json() + "\n"
    )
    out = tmp_path / "features.csv"
    run(["extract", "--metadata", str(meta), "--out", str(out)], expect=2)
    err = capsys.readouterr().err
    assert ":2: rejected:" in err and ":3: rejected:" in err
    assert "rejected 2 records" in err
    ids, _ = read_features_csv(out)
    assert ids == ["ok_1", "ok_2"]


def test_extract_strict_aborts(tmp_path, capsys):
    meta = tmp_path / "meta.jsonl"
    meta.write_text(make_metadata().to_json() + "\n{broken\n")
    out = tmp_path / "features.csv"
    run(["extract", "--metadata", str(meta), "--out", str(out), "--strict"], expect=2)
    assert ":2:" in capsys.readouterr().err


def test_extract_missing_input_is_data_error(tmp_path, capsys):
    run(["extract", "--metadata", str(tmp_path / "nope.jsonl"),
         "--out", str(tmp_path / "f.csv")], expect=2)


# ---------------------------------------------------------------------- prep

def test_prep_crops_and_reports_failures(tmp_path, capsys):
    meta_path = tmp_path / "meta.jsonl"
    rec_ok = make_metadata(image_id="have", img_width_px=60, img_height_px=50,
                           boxes=(BoundingBox(10, 10, 30, 20),))
    rec_missing = make_metadata(image_id="missing")
    meta_path.write_text(rec_ok.to_json() + "\n" + rec_missing.to_json() + "\n")

    rasters = tmp_path / "rasters"
    rasters.mkdir()
    rng = np.random.default_rng(0)
    write_raster(rasters / "have.ras", Raster(rng.uniform(size=(50, 60, 3)).astype(np.float32)))

    out = tmp_path / "prepped"
    run(["prep", "--metadata", str(meta_path), "--rasters-dir", str(rasters),
         "--out-dir", str(out), "--target-size", "16"], expect=2)
    assert (out / "have.ras").exists()
    plan = json.loads((out / "have.plan.json").read_text())
    assert plan["target_size"] == 16
    failures = [json.loads(l) for l in (out / "failures.jsonl").read_text().splitlines()]
    assert [f["image_id"] for f in failures] == ["missing"]
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"] == {
        "mode": "enlarge", "context_factor": 0.5, "target_size": 16,
        "prepared": 1, "failed": 1,
    }


# ------------------------------------------------------------- train/predict

def train_chain(dataset_dir, tmp_path, capsys=None):
    features = tmp_path / "features.csv"
    run(["extract", "--metadata", str(dataset_dir / "metadata.jsonl"),
         "--out", str(features)], capsys=capsys)
    train_cfg = tmp_path / "train.json"
    train_cfg.write_text(json.dumps({
        "hidden_units": 32, "max_epochs": 2, "batch_size": 32,
        "validation_fraction": 0.2, "seed": 5,
    }))
    model_dir = tmp_path / "models"
    run(["train", "--features", str(features),
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         str(dataset_dir / "predictions_model_1.jsonl"),
         "--labels", str(dataset_dir / "labels.csv"),
         "--out-dir", str(model_dir), "--config", str(train_cfg)], capsys=capsys)
    return features, model_dir


def test_train_and_predict(dataset_dir, tmp_path, capsys):
    features, model_dir = train_chain(dataset_dir, tmp_path, capsys)
    for model in ("model_0", "model_1"):
        assert (model_dir / f"weights_{model}.bin").exists()
        history = (model_dir / f"history_{model}.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,val_loss,train_acc,val_acc"
        assert len(history) == 3  # two epochs
    out = capsys.readouterr().out
    assert "model_0:" in out and "model_1:" in out

    fused = tmp_path / "fused_model_0.jsonl"
    run(["predict", "--features", str(features),
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         "--weights", str(model_dir / "weights_model_0.bin"),
         "--out", str(fused)], capsys=capsys)
    records = read_predictions_jsonl(fused)
    assert len(records) == 60
    assert all(r.model_id == "model_0" for r in records)

    renamed = tmp_path / "fused_renamed.jsonl"
    run(["predict", "--features", str(features),
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         "--weights", str(model_dir / "weights_model_0.bin"),
         "--out", str(renamed), "--out-model-id", "fused_0"], capsys=capsys)
    assert all(r.model_id == "fused_0" for r in read_predictions_jsonl(renamed))


def test_train_missing_labels_is_data_error(dataset_dir, tmp_path, capsys):
    features = tmp_path / "features.csv"
    run(["extract", "--metadata", str(dataset_dir / "metadata.jsonl"),
         "--out", str(features)], capsys=capsys)
    labels = read_labels_csv(dataset_dir / "labels.csv")
    short = tmp_path / "short_labels.csv"
    short.write_text(
        "image_id,sequence_id,true_class\n"
        + "\n".join(f"{i},{s},{c}" for i, s, c in labels[:-2]) + "\n"
    )
    run(["train", "--features", str(features),
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         "--labels", str(short), "--out-dir", str(tmp_path / "m")], expect=2)
    assert "missing from labels" in capsys.readouterr().err


def test_train_unknown_config_key(dataset_dir, tmp_path, capsys):
    features = tmp_path / "features.csv"
    run(["extract", "--metadata", str(dataset_dir / "metadata.jsonl"),
         "--out", str(features)], capsys=capsys)
    bad_cfg = tmp_path / "train.json"
    bad_cfg.write_text(json.dumps({"hidden_units": 8, "momentum": 0.9}))
    run(["train", "--features", str(features),
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         "--labels", str(dataset_dir / "labels.csv"),
         "--out-dir", str(tmp_path / "m"), "--config", str(bad_cfg)], expect=2)
    assert "momentum" in capsys.readouterr().err


def test_predict_rejects_mixed_models(dataset_dir, tmp_path, capsys):
    features, model_dir = train_chain(dataset_dir, tmp_path, capsys)
    mixed = tmp_path / "mixed.jsonl"
    mixed.write_text(
        (dataset_dir / "predictions_model_0.jsonl").read_text()
        + (dataset_dir / "predictions_model_1.jsonl").read_text()
    )
    run(["predict", "--features", str(features), "--predictions", str(mixed),
         "--weights", str(model_dir / "weights_model_0.bin"),
         "--out", str(tmp_path / "out.jsonl")], expect=2)
    assert "mixes models" in capsys.readouterr().err


# --------------------------------------------------------- ensemble/evaluate

def test_ensemble_and_evaluate(dataset_dir, tmp_path, capsys):
    out_csv = tmp_path / "classes.csv"
    out_probs = tmp_path / "ensemble.jsonl"
    run(["ensemble",
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         str(dataset_dir / "predictions_model_1.jsonl"),
         "--out-csv", str(out_csv), "--out-probs", str(out_probs)], capsys=capsys)
    lines = out_csv.read_text().strip().splitlines()
    assert lines[0] == "id,predicted_class,predicted_label,max_prob"
    assert len(lines) == 61
    ens = read_predictions_jsonl(out_probs)
    assert len(ens) == 60
    assert all(r.model_id == "ensemble" for r in ens)

    report_path = tmp_path / "report.json"
    text_path = tmp_path / "report.txt"
    confusion_path = tmp_path / "confusion.csv"
    run(["evaluate", "--probs", str(out_probs),
         "--labels", str(dataset_dir / "labels.csv"),
         "--out-report", str(report_path), "--out-text", str(text_path),
         "--out-confusion", str(confusion_path)], capsys=capsys)
    report = json.loads(report_path.read_text())
    assert report["n_records"] == 60
    assert 0.0 <= report["accuracy"] <= 1.0
    assert report["score"] == int(np.floor(report["weighted_f1"] * 1e6 + 0.5))
    assert "score" in text_path.read_text()
    assert confusion_path.read_text().startswith("true\\predicted,")
    assert "score" in capsys.readouterr().out


def test_ensemble_sequences_mode(dataset_dir, tmp_path, capsys):
    out_csv = tmp_path / "seq_classes.csv"
    run(["ensemble",
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         str(dataset_dir / "predictions_model_1.jsonl"),
         "--out-csv", str(out_csv), "--sequences", str(dataset_dir / "labels.csv")],
        capsys=capsys)
    labels = read_labels_csv(dataset_dir / "labels.csv")
    n_sequences = len({s for _, s, _ in labels})
    assert len(out_csv.read_text().strip().splitlines()) == 1 + n_sequences


def test_evaluate_sequences_mode(dataset_dir, tmp_path, capsys):
    out_probs = tmp_path / "ensemble.jsonl"
    run(["ensemble",
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         str(dataset_dir / "predictions_model_1.jsonl"),
         "--out-csv", str(tmp_path / "c.csv"), "--out-probs", str(out_probs)],
        capsys=capsys)
    report_path = tmp_path / "seq_report.json"
    run(["evaluate", "--probs", str(out_probs),
         "--labels", str(dataset_dir / "labels.csv"),
         "--out-report", str(report_path), "--sequences"], capsys=capsys)
    labels = read_labels_csv(dataset_dir / "labels.csv")
    n_sequences = len({s for _, s, _ in labels})
    assert json.loads(report_path.read_text())["n_records"] == n_sequences


def test_threshold_routes_to_false_detection(dataset_dir, tmp_path, capsys):
    out_csv = tmp_path / "fd.csv"
    run(["ensemble",
         "--predictions", str(dataset_dir / "predictions_model_0.jsonl"),
         str(dataset_dir / "predictions_model_1.jsonl"),
         "--out-csv", str(out_csv), "--threshold", "1.0"], capsys=capsys)
    fd_label = default_registry().labels[FALSE_DETECTION_INDEX]
    for line in out_csv.read_text().strip().splitlines()[1:]:
        cells = line.split(",")
        assert cells[1] == str(FALSE_DETECTION_INDEX)
        assert cells[2] == fd_label


def test_evaluate_duplicate_images_rejected(dataset_dir, tmp_path, capsys):
    doubled = tmp_path / "doubled.jsonl"
    text = (dataset_dir / "predictions_model_0.jsonl").read_text()
    doubled.write_text(text + text)
    run(["evaluate", "--probs", str(doubled),
         "--labels", str(dataset_dir / "labels.csv"),
         "--out-report", str(tmp_path / "r.json")], expect=2)
    assert "more than once" in capsys.readouterr().err


# --------------------------------------------------------------- exit codes

def test_usage_errors_exit_1(capsys):
    assert cli.main([]) == 1  # no subcommand prints help
    assert cli.main(["synth"]) == 1  # missing required flags
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["extract", "--metadata", "m", "--out", "o", "--box-mode", "oval"]) == 1


def test_internal_errors_exit_3(tmp_path, capsys, monkeypatch):
    def boom(path):
        raise RuntimeError("wires crossed")

    monkeypatch.setattr(cli.SynthConfig, "from_json_file", boom)
    config = synth_config(tmp_path)
    assert cli.main(["synth", "--config", str(config), "--out-dir", str(tmp_path / "d")]) == 3
    assert "internal error" in capsys.readouterr().err


def test_version_flag():
    with pytest.raises(SystemExit) as e:
        cli.main(["--version"])
    assert e.value.code == 0


def test_module_entry_point(tmp_path):
    config = synth_config(tmp_path, n_records=5, n_models=1)
    out = tmp_path / "sub"
    result = subprocess.run(
        [sys.executable, "-m", "satfusion", "synth", "--config", str(config),
         "--out-dir", str(out)],
        capture_output=True, text=True, env=PINNED_ENV,
    )
    assert result.returncode == 0, result.stderr
    assert (out / "metadata.jsonl").exists()
    assert "wrote 5 records" in result.stdout
