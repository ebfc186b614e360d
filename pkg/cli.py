"""
clockwatch command line.

Every subcommand reads JSON configs plus explicit flags, writes its results
into the output directory and prints a short summary. Exit codes: 0 success,
2 invalid input, 1 runtime failure.
"""

import asyncio
import json
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import structlog
import torch
import typer
from pydantic import ValidationError as PydanticValidationError
from rich.console import Console
from rich.markup import escape
from rich.table import Table

from config import (
    DetectConfig,
    GenerateConfig,
    LogFormat,
    LogLevel,
    SimulationConfig,
    TrainConfig,
    dump_config,
    load_config,
    override_settings,
)
from datagen import Dataset, Topology, feature_correlation, generate_dataset, load_dataset, save_dataset
from detector import detect_dataset, read_detection_log, write_detection_log
from errors import ClockwatchError, DatasetFormatError, StatisticsError, ValidationError
from harness import (
    TransportMode,
    read_packet_log,
    replay_packet_log,
    simulate,
    write_latency,
    write_packet_log,
    write_report,
)
from monitoring import HarnessMetrics, configure_logging
from stats import (
    ablation_table,
    classification_metrics,
    comparison_table,
    false_alarm_rate,
    kruskal_wallis,
    metric_table,
    roc_auc,
    score_distribution,
    summarize_delays,
    welch_t,
    write_plot_data,
    write_table,
)
from status_server import StatusServer
from stgat import Checkpoint, HyperParams, fit, load_checkpoint, predict_windows, save_checkpoint

logger = structlog.get_logger(__name__)
console = Console()
app = typer.Typer(help="Temporal-integrity anomaly detection toolkit", no_args_is_help=True)

ABLATIONS: Dict[str, Dict[str, bool]] = {
    "full": {},
    "no_curvature": {"use_curvature_loss": False},
    "no_gat": {"use_graph_attention": False},
    "no_drift_embedding": {"use_drift_embedding": False},
}


@app.callback()
def main(
    verbose: int = typer.Option(0, "--verbose", "-v", count=True, help="-v for info, -vv for debug logs"),
    log_format: LogFormat = typer.Option(LogFormat.CONSOLE, "--log-format", help="Log renderer"),
) -> None:
    level = {0: LogLevel.WARNING, 1: LogLevel.INFO}.get(verbose, LogLevel.DEBUG)
    settings = override_settings(log_level=level, log_format=log_format)
    configure_logging(settings)
    torch.set_num_threads(settings.torch_threads)
    torch.use_deterministic_algorithms(True)


def _run(action: Callable[[], None]) -> None:
    """Map package errors to exit codes"""
    try:
        action()
    except (ValidationError, PydanticValidationError) as e:
        console.print(f"[red]invalid input:[/red] {escape(str(e))}")
        raise typer.Exit(code=2)
    except ClockwatchError as e:
        console.print(f"[red]failed:[/red] {escape(str(e))}")
        raise typer.Exit(code=e.exit_code)


def _write_json(path: Path, payload: Any) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _print_table(title: str, columns: List[str], rows: List[List[Any]]) -> None:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*("-" if v is None else f"{v:.4g}" if isinstance(v, float) else str(v) for v in row))
    console.print(table)


def _read_columns(path: Path, columns: List[str]) -> pd.DataFrame:
    if not path.exists():
        raise DatasetFormatError("file not found", path=str(path))
    frame = pd.read_csv(path)
    for column in columns:
        if column not in frame.columns:
            raise DatasetFormatError("missing column", column=column, path=str(path))
    return frame


def _window_frame(dataset: Dataset, checkpoint: Checkpoint, threshold: float, split: str = "test") -> pd.DataFrame:
    preds = predict_windows(checkpoint.model, dataset, split, threshold)
    n_devices, n_windows = preds.window_scores.shape
    return pd.DataFrame(
        {
            "device": np.repeat(preds.device_ids, n_windows),
            "start": np.tile(preds.starts, n_devices),
            "score": preds.window_scores.reshape(-1),
            "prediction": preds.window_predictions.reshape(-1),
            "label": preds.window_labels.reshape(-1),
        }
    )


def _stream_metrics(dataset: Dataset, detections: List[Any]) -> Dict[str, Any]:
    """Detection delay per perturbed device and the false-alarm step rate"""
    labels_by_device = {tr.device_id: tr.labels for tr in dataset.traces}
    by_device: Dict[int, List[int]] = {}
    step_labels, fired = [], []
    for d in detections:
        if d.device is None or d.device not in labels_by_device:
            raise ValidationError("detection record without a known device", device=d.device)
        labels = labels_by_device[d.device]
        if not 0 <= d.step < len(labels):
            raise ValidationError("detection step outside the trace", device=d.device, step=d.step)
        step_labels.append(int(labels[d.step]))
        fired.append(int(d.fired))
        if d.fired:
            by_device.setdefault(d.device, []).append(d.step)

    seen = sorted({d.device for d in detections})
    delays = {}
    for device in seen:
        scenario = dataset.manifest.scenarios[device]
        if scenario.perturbed:
            after = [s for s in by_device.get(device, []) if s >= scenario.onset]
            delays[device] = float(min(after) - scenario.onset) if after else None
    summary = summarize_delays(list(delays.values()))
    return {
        "delays": {str(k): v for k, v in delays.items()},
        "mean_delay": summary.mean_delay,
        "n_detected": summary.n_detected,
        "n_missed": summary.n_missed,
        "false_alarm_rate": false_alarm_rate(step_labels, fired) if step_labels else 0.0,
    }


def _window_metrics(labels: Any, predictions: Any, scores: Optional[Any]) -> Tuple[Any, Dict[str, Any]]:
    report = classification_metrics(list(labels), list(predictions))
    if scores is not None:
        try:
            report.auc = roc_auc(list(labels), list(scores))
        except StatisticsError as e:
            logger.warning("auc_undefined", error=str(e))
    return report, report.to_dict()


@app.command()
def generate(
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="GenerateConfig JSON"),
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the config seed"),
    workers: Optional[int] = typer.Option(None, "--workers", help="Generation threads"),
) -> None:
    """Synthesize a labelled multi-device dataset"""

    def action() -> None:
        cfg = load_config(config, GenerateConfig) if config else GenerateConfig()
        updates = {k: v for k, v in {"seed": seed, "workers": workers}.items() if v is not None}
        if updates:
            cfg = GenerateConfig.model_validate({**cfg.model_dump(), **updates})
        dataset = generate_dataset(cfg)
        save_dataset(dataset, out)

        rows = []
        for split, ids in dataset.manifest.splits.items():
            perturbed = sum(1 for i in ids if dataset.manifest.scenarios[i].perturbed)
            windows = dataset.windows(split).n_windows * len(ids) if ids else 0
            rows.append([split, len(ids), perturbed, windows])
        _print_table("dataset", ["split", "devices", "perturbed", "windows"], rows)
        counts: Dict[str, int] = {}
        for scenario in dataset.manifest.scenarios:
            counts[scenario.kind.value] = counts.get(scenario.kind.value, 0) + 1
        _print_table("scenarios", ["kind", "devices"], [[k, v] for k, v in sorted(counts.items())])

    _run(action)


@app.command()
def train(
    dataset: Path = typer.Option(..., "--dataset", "-d", help="Dataset directory"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="TrainConfig JSON"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    no_curvature: bool = typer.Option(False, "--no-curvature", help="Drop the curvature loss"),
    no_gat: bool = typer.Option(False, "--no-gat", help="Replace graph attention by identity"),
    no_drift_embedding: bool = typer.Option(False, "--no-drift-embedding", help="Remove the drift embedding"),
) -> None:
    """Train the model and write checkpoint.json and losses.csv"""

    def action() -> None:
        cfg = load_config(config, TrainConfig) if config else TrainConfig()
        updates: Dict[str, Any] = {k: v for k, v in {"seed": seed, "epochs": epochs}.items() if v is not None}
        if no_curvature:
            updates["use_curvature_loss"] = False
        if no_gat:
            updates["use_graph_attention"] = False
        if no_drift_embedding:
            updates["use_drift_embedding"] = False
        hyper = HyperParams.model_validate({**cfg.hyper.model_dump(), **updates})

        data = load_dataset(dataset)
        result = _fit_and_save(data, hyper, out)
        _print_table(
            "training",
            ["epochs", "first loss", "final loss"],
            [[hyper.epochs, result.epoch_losses[0], result.epoch_losses[-1]]],
        )

    _run(action)


def _fit_and_save(data: Dataset, hyper: HyperParams, out: Path) -> Any:
    out.mkdir(parents=True, exist_ok=True)
    result = fit(data, hyper, on_epoch=lambda epoch, loss: logger.info("epoch_done", epoch=epoch, loss=loss))
    save_checkpoint(out / "checkpoint.json", result.model, data.manifest.normalization, data.manifest.window, data.manifest.dt)
    losses = pd.DataFrame(result.breakdowns)
    losses.insert(0, "epoch", range(len(losses)))
    losses.to_csv(out / "losses.csv", index=False, lineterminator="\n")
    return result


@app.command()
def detect(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="checkpoint.json"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    dataset: Optional[Path] = typer.Option(None, "--dataset", "-d", help="Dataset directory to replay"),
    stream: Optional[Path] = typer.Option(None, "--stream", help="JSONL packet log (simulate's packets.jsonl) to replay"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="DetectConfig JSON"),
    split: str = typer.Option("test", "--split", help="Dataset split"),
    topology: Topology = typer.Option(Topology.RING, "--topology", help="Device graph for --stream"),
    step_threshold: float = typer.Option(0.05, "--step-threshold", min=0.0, help="Step-change threshold (s) for --stream"),
) -> None:
    """Replay a dataset split or a packet log through the online detector.

    Writes detections.jsonl, plus windows.csv for a dataset.
    """

    def action() -> None:
        if (dataset is None) == (stream is None):
            raise ValidationError("give exactly one of --dataset or --stream")
        cfg = load_config(config, DetectConfig) if config else DetectConfig()
        ckpt = load_checkpoint(checkpoint)
        if stream is not None:
            messages = read_packet_log(stream)
            report = replay_packet_log(messages, ckpt, cfg.detector, cfg.detector.dt, topology, step_threshold)
            out.mkdir(parents=True, exist_ok=True)
            write_detection_log(out / "detections.jsonl", report.detections)
            rows = [
                [device, count, sum(1 for d in report.fired if d.device == device)]
                for device, count in sorted(report.packets.items())
            ]
            _print_table("detections", ["device", "packets", "fired"], rows)
            return

        data = load_dataset(dataset)
        out.mkdir(parents=True, exist_ok=True)

        report = detect_dataset(ckpt, data, cfg.detector, split)
        write_detection_log(out / "detections.jsonl", report.all_detections())
        _window_frame(data, ckpt, cfg.window_threshold, split).to_csv(
            out / "windows.csv", index=False, lineterminator="\n"
        )
        rows = [
            [dev.device, dev.scenario, dev.onset, dev.result.first_detection, dev.result.delay, len(dev.result.fired_steps)]
            for dev in report.devices
        ]
        _print_table("detections", ["device", "scenario", "onset", "first", "delay", "fired"], rows)

    _run(action)


@app.command()
def evaluate(
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    windows: Optional[Path] = typer.Option(None, "--windows", help="windows.csv with label, prediction, score"),
    labels: Optional[Path] = typer.Option(None, "--labels", help="CSV with a label column"),
    predictions: Optional[Path] = typer.Option(None, "--predictions", help="CSV with a prediction column"),
    detections: Optional[Path] = typer.Option(None, "--detections", help="detections.jsonl"),
    dataset: Optional[Path] = typer.Option(None, "--dataset", "-d", help="Dataset directory (for delays)"),
    name: str = typer.Option("STGAT", "--name", help="Model name in the metric table"),
) -> None:
    """Classification metrics, AUC, detection delay and false-alarm rate"""

    def action() -> None:
        if windows is not None:
            frame = _read_columns(windows, ["label", "prediction"])
            y, p = frame["label"], frame["prediction"]
            scores = frame["score"] if "score" in frame.columns else None
        elif labels is not None and predictions is not None:
            y = _read_columns(labels, ["label"])["label"]
            pred_frame = _read_columns(predictions, ["prediction"])
            p = pred_frame["prediction"]
            scores = pred_frame["score"] if "score" in pred_frame.columns else None
        else:
            raise ValidationError("pass --windows or both --labels and --predictions")

        report, payload = _window_metrics(y, p, scores)
        if detections is not None:
            if dataset is None:
                raise ValidationError("--detections needs --dataset for onsets and labels")
            stream = _stream_metrics(load_dataset(dataset), read_detection_log(detections))
            report.mean_delay = stream["mean_delay"]
            payload.update(stream)
            payload["mean_delay"] = stream["mean_delay"]

        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "metrics.json", payload)
        write_table(metric_table([(name, report)]), out / "table_metrics.csv")
        _print_table(
            "metrics",
            ["ACC", "Precision", "Recall", "F1", "AUC", "delay"],
            [[report.accuracy, report.precision, report.recall, report.f1, report.auc, report.mean_delay]],
        )
        if report.undefined:
            console.print(f"zero-denominator metrics reported as 0: {', '.join(report.undefined)}")

    _run(action)


@app.command("simulate")
def simulate_command(
    config: Path = typer.Option(..., "--config", "-c", help="SimulationConfig JSON"),
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Overrides the config checkpoint"),
    mode: Optional[TransportMode] = typer.Option(None, "--mode", help="in_process or socket"),
    host: Optional[str] = typer.Option(None, "--host", help="Inference listen address"),
    port: Optional[int] = typer.Option(None, "--port", help="Inference listen port (0 picks a free one)"),
    status_port: Optional[int] = typer.Option(None, "--status-port", help="Serve /health, /status and /metrics"),
) -> None:
    """Run the sensor/inference testbed; writes report.json, detections.jsonl, packets.jsonl and latency.json"""

    def action() -> None:
        cfg = load_config(config, SimulationConfig)
        updates = {k: v for k, v in {"mode": mode, "host": host, "port": port, "checkpoint": checkpoint}.items() if v is not None}
        if updates:
            cfg = SimulationConfig.model_validate({**cfg.model_dump(), **updates})
        if cfg.checkpoint is None:
            raise ValidationError("no checkpoint given (config or --checkpoint)")
        ckpt = load_checkpoint(cfg.checkpoint)

        report = asyncio.run(_simulate_with_status(cfg, ckpt, status_port))
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "report.json")
        write_latency(report, out / "latency.json")
        write_packet_log(out / "packets.jsonl", report.received)
        write_detection_log(out / "detections.jsonl", report.detections)

        rows = []
        for node in cfg.nodes:
            device = node.device_id
            fired = sum(1 for d in report.fired if d.device == device)
            rows.append(
                [device, node.scenario.kind.value, report.sent.get(device, 0), report.packets.get(device, 0), fired, report.delays.get(device)]
            )
        _print_table("simulation", ["device", "scenario", "sent", "received", "fired", "delay"], rows)
        console.print(f"latency: {report.latency}")

    _run(action)


async def _simulate_with_status(cfg: SimulationConfig, ckpt: Checkpoint, status_port: Optional[int]) -> Any:
    metrics = HarnessMetrics()
    if status_port is None:
        return await simulate(cfg, ckpt, metrics)
    server = StatusServer(cfg.host, status_port, metrics_provider=lambda: metrics)
    await server.start()
    try:
        return await simulate(cfg, ckpt, metrics)
    finally:
        await server.stop()


@app.command()
def ablate(
    dataset: Path = typer.Option(..., "--dataset", "-d", help="Dataset directory"),
    out: Path = typer.Option(..., "--out", "-o", help="Sweep directory"),
    config: Optional[Path] = typer.Option(None, "--config", "-c", help="TrainConfig JSON"),
    detect_config: Optional[Path] = typer.Option(None, "--detect-config", help="DetectConfig JSON"),
    seeds: int = typer.Option(5, "--seeds", min=1, help="Seeds per variant"),
) -> None:
    """Train and evaluate every ablation variant for several seeds"""

    def action() -> None:
        train_cfg = load_config(config, TrainConfig) if config else TrainConfig()
        detect_cfg = load_config(detect_config, DetectConfig) if detect_config else DetectConfig()
        data = load_dataset(dataset)
        rows = []
        for variant, flags in ABLATIONS.items():
            for seed in range(seeds):
                run_dir = out / variant / f"seed_{seed}"
                hyper = HyperParams.model_validate({**train_cfg.hyper.model_dump(), **flags, "seed": seed})
                _fit_and_save(data, hyper, run_dir)
                payload = _evaluate_run(data, load_checkpoint(run_dir / "checkpoint.json"), detect_cfg)
                _write_json(run_dir / "metrics.json", payload)
                rows.append([variant, seed, payload["f1"], payload["mean_delay"]])
                logger.info("ablation_run_done", variant=variant, seed=seed, f1=payload["f1"])
        dump_config(train_cfg, out / "train_config.json")
        _print_table("ablation", ["variant", "seed", "F1", "delay"], rows)

    _run(action)


def _evaluate_run(data: Dataset, ckpt: Checkpoint, cfg: DetectConfig) -> Dict[str, Any]:
    frame = _window_frame(data, ckpt, cfg.window_threshold)
    _, payload = _window_metrics(frame["label"], frame["prediction"], frame["score"])
    payload.update(_stream_metrics(data, detect_dataset(ckpt, data, cfg.detector).all_detections()))
    return payload


def _sweep_results(sweep: Path) -> Dict[str, List[Dict[str, Any]]]:
    results: Dict[str, List[Dict[str, Any]]] = {}
    for metrics_path in sorted(sweep.glob("*/seed_*/metrics.json")):
        variant = metrics_path.parent.parent.name
        results.setdefault(variant, []).append(json.loads(metrics_path.read_text(encoding="utf-8")))
    if not results:
        raise DatasetFormatError("no */seed_*/metrics.json under sweep directory", path=str(sweep))
    return results


def _mean_or_none(values: List[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@app.command()
def report(
    out: Path = typer.Option(..., "--out", "-o", help="Output directory"),
    sweep: Optional[Path] = typer.Option(None, "--sweep", help="Directory written by ablate"),
    windows: Optional[Path] = typer.Option(None, "--windows", help="windows.csv for score distributions"),
    detections: Optional[Path] = typer.Option(None, "--detections", help="detections.jsonl for score traces"),
    dataset: Optional[Path] = typer.Option(None, "--dataset", "-d", help="Dataset for the feature correlation table"),
) -> None:
    """Emit CSV/JSON tables and plot-data CSVs"""

    def action() -> None:
        if not any(p is not None for p in (sweep, windows, detections, dataset)):
            raise ValidationError("nothing to report: pass --sweep, --windows, --detections or --dataset")
        out.mkdir(parents=True, exist_ok=True)
        written: List[str] = []

        if sweep is not None:
            written.extend(_report_sweep(_sweep_results(sweep), out))
        if windows is not None:
            frame = _read_columns(windows, ["score", "label"])
            normal = frame.loc[frame["label"] == 0, "score"].to_numpy()
            attack = frame.loc[frame["label"] == 1, "score"].to_numpy()
            _write_json(out / "score_distribution.json", score_distribution(normal, attack))
            series = {}
            for label, values in (("normal", normal), ("attack", attack)):
                ordered = np.sort(values)
                series[label] = (ordered, np.arange(1, ordered.size + 1) / max(ordered.size, 1))
            write_plot_data(out / "plot_score_cdf.csv", series)
            written.extend(["score_distribution.json", "plot_score_cdf.csv"])
        if detections is not None:
            records = read_detection_log(detections)
            series = {}
            for device in sorted({d.device for d in records if d.device is not None}):
                rows = [d for d in records if d.device == device]
                steps = [d.step for d in rows]
                series[f"S/device_{device}"] = (steps, [d.S for d in rows])
                series[f"theta/device_{device}"] = (steps, [d.theta for d in rows])
            write_plot_data(out / "plot_scores.csv", series)
            written.append("plot_scores.csv")
        if dataset is not None:
            corr = feature_correlation(load_dataset(dataset).traces)
            corr.to_csv(out / "feature_correlation.csv", lineterminator="\n")
            written.append("feature_correlation.csv")

        _print_table("report", ["file"], [[name] for name in written])

    _run(action)


def _report_sweep(results: Dict[str, List[Dict[str, Any]]], out: Path) -> List[str]:
    rows = [
        (variant, _mean_or_none([r["f1"] for r in runs]), _mean_or_none([r.get("mean_delay") for r in runs]))
        for variant, runs in sorted(results.items(), key=lambda item: (item[0] != "full", item[0]))
    ]
    write_table(ablation_table(rows), out / "table_ablation.csv")
    written = ["table_ablation.csv"]

    f1 = {variant: [r["f1"] for r in runs] for variant, runs in results.items()}
    comparisons = []
    if "full" in f1:
        for variant, values in sorted(f1.items()):
            if variant == "full":
                continue
            try:
                comparisons.append((f"full vs {variant}", welch_t(f1["full"], values)))
            except StatisticsError as e:
                logger.warning("comparison_skipped", variant=variant, error=str(e))
    if comparisons:
        write_table(comparison_table(comparisons), out / "table_comparison.csv")
        written.append("table_comparison.csv")
    try:
        kw = kruskal_wallis([f1[v] for v in sorted(f1)])
        _write_json(out / "kruskal_wallis.json", {"H": kw.statistic, "dof": kw.dof, "p_value": kw.p_value, "eta_squared": kw.effect_size})
        written.append("kruskal_wallis.json")
    except StatisticsError as e:
        logger.warning("kruskal_wallis_skipped", error=str(e))
    return written


if __name__ == "__main__":
    app()
