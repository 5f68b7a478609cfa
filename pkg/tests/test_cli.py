"""Command-line surface: the end-to-end pipeline smoke, failure
diagnostics, and the config-file format."""

import os

import numpy as np
import pytest

from vertseg.cli import cli, read_config_file

pytestmark = pytest.mark.filterwarnings("ignore:ASPP dilation")


def run(argv, capsys=None):
    rc = cli(argv)
    return rc


def test_pipeline_smoke(tmp_path, capsys):
    data_dir = str(tmp_path / "data")
    cache_dir = str(tmp_path / "cache")
    run_dir = str(tmp_path / "run")

    assert cli(["synth", "--n", "3", "--seed", "7", "--out", data_dir,
                "--size", "24", "24", "24"]) == 0
    assert os.path.exists(os.path.join(data_dir, "images", "synth_000.nii.gz"))

    assert cli(["preprocess", "--in", data_dir, "--out", cache_dir,
                "--plane", "sagittal", "--size", "32", "--seed", "0"]) == 0
    assert os.path.exists(os.path.join(cache_dir, "index.json"))

    assert cli(["train", "--cache", cache_dir, "--out", run_dir,
                "--scale", "desk", "--epochs", "2", "--batch-size", "4",
                "--seed", "0"]) == 0
    history = os.path.join(run_dir, "history.csv")
    assert os.path.exists(history)
    lines = open(history).read().splitlines()
    assert lines[0] == "epoch,lr,train_loss,train_f1,valid_loss,valid_f1,wall_time"
    assert len(lines) == 3  # header + 2 epochs
    weights = os.path.join(run_dir, "weights_final.vsw")
    assert os.path.exists(weights)

    metrics = str(tmp_path / "metrics.csv")
    assert cli(["evaluate", "--cache", cache_dir, "--weights", weights,
                "--plane", "sagittal", "--phase", "both",
                "--out", metrics]) == 0
    assert os.path.exists(metrics)

    report_md = str(tmp_path / "report.md")
    assert cli(["report", "--metrics", metrics, "--out", report_md]) == 0
    out = capsys.readouterr().out
    assert "| Plane | Model | Phase | Precision (%) | Recall (%) | F1-score (%) |" in out
    assert os.path.exists(report_md)

    mask_out = str(tmp_path / "pred.nii.gz")
    image = os.path.join(data_dir, "images", "synth_000.nii.gz")
    assert cli(["predict", "--image", image, "--weights", weights,
                "--plane", "sagittal", "--out", mask_out]) == 0
    from vertseg.data import load_volume
    pred = load_volume(mask_out)
    assert set(np.unique(pred.data)) <= {0.0, 1.0}
    assert pred.spacing == (1.0, 1.0, 1.0)


def test_evaluate_without_model_fails_with_diagnostic(tmp_path, capsys):
    rc = cli(["evaluate", "--cache", str(tmp_path), "--weights",
              str(tmp_path / "missing.vsw"), "--out", str(tmp_path / "m.csv")])
    assert rc != 0
    err = capsys.readouterr().err
    assert "error:" in err
    assert "missing.vsw" in err


def test_unknown_flag_exits_with_usage(capsys):
    rc = cli(["synth", "--bogus"])
    assert rc == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_no_command_exits_with_usage(capsys):
    assert cli([]) == 2


def test_train_on_missing_cache_fails(tmp_path, capsys):
    rc = cli(["train", "--cache", str(tmp_path / "nope"), "--out",
              str(tmp_path / "run"), "--epochs", "1"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_train_pause_and_resume(tmp_path, capsys):
    data_dir = str(tmp_path / "data")
    cache_dir = str(tmp_path / "cache")
    assert cli(["synth", "--n", "2", "--seed", "4", "--out", data_dir,
                "--size", "24", "24", "24"]) == 0
    assert cli(["preprocess", "--in", data_dir, "--out", cache_dir,
                "--plane", "sagittal", "--size", "32",
                "--fractions", "0.5", "0.5", "0.0"]) == 0

    part = str(tmp_path / "part")
    assert cli(["train", "--cache", cache_dir, "--out", part,
                "--epochs", "3", "--batch-size", "8", "--seed", "0",
                "--stop-epoch", "1"]) == 0
    assert len(open(os.path.join(part, "history.csv")).read().splitlines()) == 2

    done = str(tmp_path / "done")
    assert cli(["train", "--cache", cache_dir, "--out", done,
                "--resume", os.path.join(part, "checkpoint.vsc")]) == 0
    lines = open(os.path.join(done, "history.csv")).read().splitlines()
    assert len(lines) == 4  # header + all 3 epochs, seamlessly concatenated
    assert [line.split(",")[0] for line in lines[1:]] == ["0", "1", "2"]


def test_ablate_cli_smoke(tmp_path, capsys):
    data_dir = str(tmp_path / "data")
    cache_dir = str(tmp_path / "cache")
    out_dir = str(tmp_path / "ablation")
    assert cli(["synth", "--n", "3", "--seed", "5", "--out", data_dir,
                "--size", "24", "24", "24"]) == 0
    assert cli(["preprocess", "--in", data_dir, "--out", cache_dir,
                "--plane", "sagittal", "--size", "32",
                "--fractions", "0.34", "0.33", "0.33"]) == 0
    assert cli(["ablate", "--cache", cache_dir, "--out", out_dir,
                "--seeds", "0", "--epochs", "1", "--batch-size", "8"]) == 0
    csv_lines = open(os.path.join(out_dir, "ablation.csv")).read().splitlines()
    # 2 models x 2 aug x 1 plane x 2 phases = 8 rows + header
    assert len(csv_lines) == 9
    assert os.path.exists(os.path.join(out_dir, "ablation_plot.png"))
    assert os.path.exists(os.path.join(out_dir, "ablation_bars.csv"))
    assert os.path.exists(os.path.join(out_dir, "ablation_notes.txt"))


def test_config_file_parsing(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text(
        "# training settings\n"
        "epochs = 12\n"
        "batch_size = 4\n"
        "lr_peak = 0.00048   # the published peak\n"
        "supervise_mask1 = true\n"
        "note = desk run\n")
    values = read_config_file(path)
    assert values == {"epochs": 12, "batch_size": 4, "lr_peak": 4.8e-4,
                      "supervise_mask1": True, "note": "desk run"}
    with pytest.raises(ValueError, match="key = value"):
        bad = tmp_path / "bad.cfg"
        bad.write_text("just words\n")
        read_config_file(bad)


def test_config_file_feeds_training(tmp_path, capsys):
    data_dir = str(tmp_path / "data")
    cache_dir = str(tmp_path / "cache")
    cfg_path = tmp_path / "t.cfg"
    cfg_path.write_text("epochs = 1\nbatch_size = 2\n")
    assert cli(["synth", "--n", "2", "--seed", "3", "--out", data_dir,
                "--size", "24", "24", "24"]) == 0
    assert cli(["preprocess", "--in", data_dir, "--out", cache_dir,
                "--plane", "coronal", "--size", "32",
                "--fractions", "0.5", "0.5", "0.0"]) == 0
    run_dir = str(tmp_path / "run")
    assert cli(["train", "--cache", cache_dir, "--out", run_dir,
                "--config", str(cfg_path), "--seed", "1"]) == 0
    lines = open(os.path.join(run_dir, "history.csv")).read().splitlines()
    assert len(lines) == 2  # header + 1 epoch
