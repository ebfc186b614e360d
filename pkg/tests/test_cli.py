import json

import pandas as pd
import pytest
from typer.testing import CliRunner

from cli import app
from stgat import save_checkpoint
from tests.conftest import SMALL_GENERATE, TINY_HYPER, overflow_checkpoint

runner = CliRunner()


def _invoke(*args):
    return runner.invoke(app, [str(a) for a in args])


@pytest.fixture
def generated(tmp_path, config_file):
    path = tmp_path / "data"
    result = _invoke("generate", "--out", path, "--config", config_file(SMALL_GENERATE, "generate.json"))
    assert result.exit_code == 0, result.output
    return path


def test_pipeline_end_to_end(tmp_path, generated, config_file):
    train_dir = tmp_path / "train"
    result = _invoke("train", "--dataset", generated, "--out", train_dir, "--config", config_file({"hyper": TINY_HYPER}, "train.json"))
    assert result.exit_code == 0, result.output
    losses = pd.read_csv(train_dir / "losses.csv")
    assert list(losses["epoch"]) == [0, 1]
    assert {"total", "rec", "cls", "drift", "curvature", "overflow"} <= set(losses.columns)

    detect_dir = tmp_path / "detect"
    result = _invoke("detect", "--checkpoint", train_dir / "checkpoint.json", "--dataset", generated, "--out", detect_dir)
    assert result.exit_code == 0, result.output
    windows = pd.read_csv(detect_dir / "windows.csv")
    assert list(windows.columns) == ["device", "start", "score", "prediction", "label"]
    assert len(windows) == 3 * 19
    assert len((detect_dir / "detections.jsonl").read_text(encoding="utf-8").splitlines()) == 3 * 181

    eval_dir = tmp_path / "eval"
    result = _invoke(
        "evaluate",
        "--out", eval_dir,
        "--windows", detect_dir / "windows.csv",
        "--detections", detect_dir / "detections.jsonl",
        "--dataset", generated,
    )
    assert result.exit_code == 0, result.output
    metrics = json.loads((eval_dir / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["tp"] + metrics["fp"] + metrics["tn"] + metrics["fn"] == 3 * 19
    assert metrics["n_detected"] + metrics["n_missed"] == 2
    assert 0.0 <= metrics["false_alarm_rate"] <= 1.0
    table = pd.read_csv(eval_dir / "table_metrics.csv")
    assert table.loc[0, "Model"] == "STGAT"


def test_generate_is_byte_identical_for_a_seed(tmp_path, generated, config_file):
    again = tmp_path / "again"
    result = _invoke("generate", "--out", again, "--config", config_file(SMALL_GENERATE, "generate.json"), "--workers", 3)
    assert result.exit_code == 0, result.output
    for name in ("manifest.json", "traces.csv"):
        assert (again / name).read_bytes() == (generated / name).read_bytes()


def test_invalid_onset_range_exits_with_two(tmp_path, config_file):
    bad = config_file({**SMALL_GENERATE, "onset_range": [0.5, 1.0]}, "bad.json")
    result = _invoke("generate", "--out", tmp_path / "data", "--config", bad)
    assert result.exit_code == 2
    assert "onset_range" in result.output


def test_missing_config_exits_with_two(tmp_path):
    result = _invoke("generate", "--out", tmp_path / "data", "--config", tmp_path / "nope.json")
    assert result.exit_code == 2


def test_evaluate_rejects_mismatched_lengths(tmp_path):
    (tmp_path / "labels.csv").write_text("label\n0\n1\n1\n", encoding="utf-8")
    (tmp_path / "predictions.csv").write_text("prediction\n0\n1\n", encoding="utf-8")
    result = _invoke(
        "evaluate",
        "--out", tmp_path / "eval",
        "--labels", tmp_path / "labels.csv",
        "--predictions", tmp_path / "predictions.csv",
    )
    assert result.exit_code == 2


def test_evaluate_flags_undefined_metrics(tmp_path):
    (tmp_path / "labels.csv").write_text("label\n0\n0\n", encoding="utf-8")
    (tmp_path / "predictions.csv").write_text("prediction\n0\n0\n", encoding="utf-8")
    result = _invoke(
        "evaluate",
        "--out", tmp_path / "eval",
        "--labels", tmp_path / "labels.csv",
        "--predictions", tmp_path / "predictions.csv",
    )
    assert result.exit_code == 0, result.output
    metrics = json.loads((tmp_path / "eval" / "metrics.json").read_text(encoding="utf-8"))
    assert metrics["undefined"] == ["precision", "recall", "f1"]
    assert metrics["auc"] is None


def test_simulate_writes_report(tmp_path, config_file):
    ckpt = overflow_checkpoint()
    ckpt_path = tmp_path / "checkpoint.json"
    save_checkpoint(ckpt_path, ckpt.model, ckpt.normalization, ckpt.window, ckpt.dt)
    sim = config_file(
        {
            "nodes": [
                {"device_id": 1, "scenario": {"kind": "epoch_overflow", "onset": 60}, "physical_seed": 11, "seed": 1},
                {"device_id": 2, "physical_seed": 12, "seed": 2},
            ],
            "ticks": 120,
            "checkpoint": str(ckpt_path),
        },
        "simulate.json",
    )
    out = tmp_path / "sim"
    result = _invoke("simulate", "--config", sim, "--out", out)
    assert result.exit_code == 0, result.output
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["packets"] == {"1": 120, "2": 120}
    assert report["delays"]["1"] is not None
    assert {record["device"] for record in report["detections"]} == {1}
    assert "latency" not in report
    assert json.loads((out / "latency.json").read_text(encoding="utf-8"))["count"] > 0

    replay = tmp_path / "replay"
    result = _invoke("detect", "--checkpoint", ckpt_path, "--stream", out / "packets.jsonl", "--out", replay)
    assert result.exit_code == 0, result.output
    assert (replay / "detections.jsonl").read_bytes() == (out / "detections.jsonl").read_bytes()
    assert not (replay / "windows.csv").exists()


def test_detect_needs_exactly_one_source(tmp_path, generated):
    ckpt = overflow_checkpoint()
    ckpt_path = tmp_path / "checkpoint.json"
    save_checkpoint(ckpt_path, ckpt.model, ckpt.normalization, ckpt.window, ckpt.dt)
    assert _invoke("detect", "--checkpoint", ckpt_path, "--out", tmp_path / "a").exit_code == 2
    both = _invoke("detect", "--checkpoint", ckpt_path, "--dataset", generated, "--stream", tmp_path / "p.jsonl", "--out", tmp_path / "b")
    assert both.exit_code == 2
    missing = _invoke("detect", "--checkpoint", ckpt_path, "--stream", tmp_path / "p.jsonl", "--out", tmp_path / "c")
    assert missing.exit_code == 2


def test_simulate_without_checkpoint_exits_with_two(tmp_path, config_file):
    sim = config_file({"nodes": [{"device_id": 1}], "ticks": 10}, "simulate.json")
    result = _invoke("simulate", "--config", sim, "--out", tmp_path / "sim")
    assert result.exit_code == 2


def _write_sweep(root, f1_by_variant):
    for variant, values in f1_by_variant.items():
        for seed, f1 in enumerate(values):
            run = root / variant / f"seed_{seed}"
            run.mkdir(parents=True)
            (run / "metrics.json").write_text(json.dumps({"f1": f1, "mean_delay": 2.0 + seed}), encoding="utf-8")


def test_report_from_sweep(tmp_path):
    sweep = tmp_path / "sweep"
    _write_sweep(sweep, {"full": [0.91, 0.93, 0.92], "no_gat": [0.80, 0.83, 0.81]})
    out = tmp_path / "report"
    result = _invoke("report", "--out", out, "--sweep", sweep)
    assert result.exit_code == 0, result.output

    ablation = pd.read_csv(out / "table_ablation.csv")
    assert ablation["Variant"].tolist() == ["full", "no_gat"]
    assert ablation.loc[0, "F1-score"] == pytest.approx(0.92)
    assert ablation.loc[0, "Detection delay"] == pytest.approx(3.0)

    comparison = pd.read_csv(out / "table_comparison.csv")
    assert comparison.loc[0, "Comparison"] == "full vs no_gat"
    assert comparison.loc[0, "t-statistic"] > 0

    kw = json.loads((out / "kruskal_wallis.json").read_text(encoding="utf-8"))
    assert kw["dof"] == 1.0


def test_report_needs_an_input(tmp_path):
    assert _invoke("report", "--out", tmp_path / "report").exit_code == 2


def test_ablate_then_report(tmp_path, generated, config_file):
    sweep = tmp_path / "sweep"
    result = _invoke(
        "ablate",
        "--dataset", generated,
        "--out", sweep,
        "--config", config_file({"hyper": TINY_HYPER}, "train.json"),
        "--seeds", 2,
    )
    assert result.exit_code == 0, result.output
    for variant in ("full", "no_curvature", "no_gat", "no_drift_embedding"):
        for seed in range(2):
            assert (sweep / variant / f"seed_{seed}" / "metrics.json").exists()
    assert (sweep / "train_config.json").exists()

    result = _invoke("report", "--out", tmp_path / "report", "--sweep", sweep, "--dataset", generated)
    assert result.exit_code == 0, result.output
    assert len(pd.read_csv(tmp_path / "report" / "table_ablation.csv")) == 4
    assert (tmp_path / "report" / "feature_correlation.csv").exists()
