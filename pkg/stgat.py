"""
Spatio-temporal graph attention detector.

Drift-aware embedding, residual single-head temporal self-attention, graph
attention over devices, per-step heads and the composite training objective.
Everything runs in float64 on CPU; gradients come from autograd.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import structlog
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from clockdyn import T0
from datagen import (
    Dataset,
    DeviceGraph,
    DeviceTrace,
    NormalizationStats,
    model_inputs,
)
from errors import DatasetFormatError, TrainingDivergedError, ValidationError

logger = structlog.get_logger(__name__)

DTYPE = torch.float64
CHECKPOINT_VERSION = 1


class LossReduction(str, Enum):
    SUM = "sum"
    MEAN = "mean"


class HyperParams(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    d_model: int = Field(default=16, ge=4)
    n_layers: int = Field(default=2, ge=1)
    lambda_rec: float = Field(default=1.0, ge=0)
    lambda_cls: float = Field(default=1.0, ge=0)
    lambda_delta: float = Field(default=0.1, ge=0)
    lambda_K: float = Field(default=0.01, ge=0)
    mu_K: Optional[float] = Field(default=None, ge=0, description="Fixed curvature target; None means 0 for the affine encoder, the batch nominal mean through attention")
    learning_rate: float = Field(default=5e-4, gt=0)
    epochs: int = Field(default=30, ge=1)
    seed: int = 0
    use_drift_embedding: bool = True
    use_graph_attention: bool = True
    use_curvature_loss: bool = True
    use_layer_norm: bool = False
    curvature_through_attention: bool = False
    overflow_horizon: int = Field(default=5, ge=0)
    overflow_weight: float = Field(default=0.1, ge=0)
    overflow_margin: float = Field(default=10.0, ge=0)
    loss_reduction: LossReduction = LossReduction.SUM


class AttentionLayer(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.wq = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.wk = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.wv = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))


class STGAT(nn.Module):
    """Learnable parameters plus the forward pass"""

    def __init__(self, n_features: int, hyper: HyperParams):
        super().__init__()
        d = hyper.d_model
        self.n_features = n_features
        self.hyper = hyper

        self.w_emb = nn.Parameter(torch.empty(n_features, 4, dtype=DTYPE))
        self.w_in = nn.Parameter(torch.empty(d, n_features, dtype=DTYPE))
        self.b_in = nn.Parameter(torch.empty(d, dtype=DTYPE))
        self.layers = nn.ModuleList([AttentionLayer(d) for _ in range(hyper.n_layers)])
        self.gat_w = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.gat_a = nn.Parameter(torch.empty(2 * d, dtype=DTYPE))
        self.cls_w = nn.Parameter(torch.empty(2 * d, dtype=DTYPE))
        self.cls_b = nn.Parameter(torch.empty((), dtype=DTYPE))
        self.drift_w = nn.Parameter(torch.empty(2 * d, dtype=DTYPE))
        self.drift_b = nn.Parameter(torch.empty((), dtype=DTYPE))
        self.rec_w = nn.Parameter(torch.empty(n_features, 2 * d, dtype=DTYPE))
        self.rec_b = nn.Parameter(torch.empty(n_features, dtype=DTYPE))
        self.w_o = nn.Parameter(torch.empty(4, dtype=DTYPE))

        self.reset_parameters()

    def reset_parameters(self) -> None:
        """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]"""
        generator = torch.Generator().manual_seed(self.hyper.seed)
        d = self.hyper.d_model
        fan_in = {
            "w_emb": 4,
            "w_in": self.n_features,
            "b_in": self.n_features,
            "gat_w": d,
            "gat_a": 2 * d,
            "w_o": 4,
        }
        with torch.no_grad():
            for name, param in self.named_parameters():
                leaf = name.rsplit(".", 1)[-1]
                bound = 1.0 / math.sqrt(fan_in.get(leaf, d if name.startswith("layers") else 2 * d))
                param.uniform_(-bound, bound, generator=generator)

    def forward(self, x: torch.Tensor, d: torch.Tensor, adjacency: torch.Tensor) -> "ForwardOutput":
        """x: (..., N, T, F), d: (..., N, T, 4), adjacency: (N, N) bool"""
        if x.shape[:-1] != d.shape[:-1] or x.shape[-1] != self.n_features or d.shape[-1] != 4:
            raise ValidationError("batch shapes do not conform", x=tuple(x.shape), d=tuple(d.shape))
        n_nodes = x.shape[-3]
        if tuple(adjacency.shape) != (n_nodes, n_nodes):
            raise ValidationError("graph does not match device count", nodes=n_nodes, adjacency=tuple(adjacency.shape))

        hyper = self.hyper
        h = drift_embed(x, d, self, hyper.use_drift_embedding)
        attention = []
        for layer in self.layers:
            h, weights = temporal_attention_block(h, layer)
            if hyper.use_layer_norm:
                h = F.layer_norm(h, (hyper.d_model,))
            attention.append(weights)

        pooled = h.mean(dim=-2)
        if hyper.use_graph_attention:
            g, alpha = gat_layer(pooled, adjacency, self.gat_w, self.gat_a)
        else:
            g, alpha = pooled, None

        fused = torch.cat([h, g.unsqueeze(-2).expand_as(h)], dim=-1)
        logits = fused @ self.cls_w + self.cls_b
        delta_hat = fused @ self.drift_w + self.drift_b
        x_hat = fused @ self.rec_w.T + self.rec_b

        if hyper.curvature_through_attention:
            k_vals = attention_curvature(x, d, self)
        else:
            k_vals = encoder_curvature(self).expand(logits.shape)

        return ForwardOutput(
            logits=logits,
            p_hat=torch.sigmoid(logits),
            delta_hat=delta_hat,
            x_hat=x_hat,
            k_vals=k_vals,
            attention=attention,
            gat_alpha=alpha,
        )


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    p_hat: torch.Tensor
    delta_hat: torch.Tensor
    x_hat: torch.Tensor
    k_vals: torch.Tensor
    attention: List[torch.Tensor] = field(default_factory=list)
    gat_alpha: Optional[torch.Tensor] = None


@dataclass
class Batch:
    x: torch.Tensor  # (..., N, T, F) normalized
    d: torch.Tensor  # (..., N, T, 4) normalized, overflow column raw
    adjacency: torch.Tensor  # (N, N) bool
    labels: torch.Tensor  # (..., N, T)
    delta: torch.Tensor  # (..., N, T) raw drift in seconds
    overflow_target: torch.Tensor  # (..., N, T)
    proximity: torch.Tensor  # (..., N, T)


@dataclass
class LossBreakdown:
    total: torch.Tensor
    rec: torch.Tensor
    cls: torch.Tensor
    drift: torch.Tensor
    curvature: torch.Tensor
    overflow: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "rec": float(self.rec.detach()),
            "cls": float(self.cls.detach()),
            "drift": float(self.drift.detach()),
            "curvature": float(self.curvature.detach()),
            "overflow": float(self.overflow.detach()),
        }


def drift_embed(x: torch.Tensor, d: torch.Tensor, model: STGAT, use_drift_embedding: bool = True) -> torch.Tensor:
    """project(x + W_emb d), or project(x) when the drift embedding is ablated"""
    z = x + d @ model.w_emb.T if use_drift_embedding else x
    return z @ model.w_in.T + model.b_in


def temporal_attention_block(h: torch.Tensor, layer: AttentionLayer) -> Tuple[torch.Tensor, torch.Tensor]:
    """softmax(H Wq (H Wk)^T / sqrt(d)) H Wv + H; returns output and weights"""
    q = h @ layer.wq
    k = h @ layer.wk
    v = h @ layer.wv
    scores = q @ k.transpose(-1, -2) / math.sqrt(h.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    return weights @ v + h, weights


def gat_layer(
    h: torch.Tensor, adjacency: torch.Tensor, w: torch.Tensor, a: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """tanh(sum_j alpha_ij W h_j) with alpha softmax of a^T [W h_i || W h_j] over neighbours"""
    mask = adjacency.to(torch.bool)
    isolated = ~mask.any(dim=-1)
    if bool(isolated.any()):
        mask = mask | torch.diag(isolated)
    wh = h @ w.T
    d = wh.shape[-1]
    e = (wh @ a[:d]).unsqueeze(-1) + (wh @ a[d:]).unsqueeze(-2)
    e = e.masked_fill(~mask, float("-inf"))
    alpha = torch.softmax(e, dim=-1)
    return torch.tanh(alpha @ wh), alpha


def embedding_jacobian(model: STGAT) -> torch.Tensor:
    """d_model x 4 Jacobian of the embedding output with respect to d"""
    if not model.hyper.use_drift_embedding:
        return torch.zeros(model.hyper.d_model, 4, dtype=DTYPE)
    return model.w_in @ model.w_emb


def curvature_from_jacobian(j: torch.Tensor) -> torch.Tensor:
    eye = torch.eye(j.shape[-1], dtype=j.dtype)
    return torch.linalg.matrix_norm(j.transpose(-1, -2) @ j - eye, ord="fro")


def encoder_curvature(model: STGAT) -> torch.Tensor:
    """||J^T J - I||_F for the affine embedding (constant over steps)"""
    return curvature_from_jacobian(embedding_jacobian(model))


def attention_curvature(x: torch.Tensor, d: torch.Tensor, model: STGAT) -> torch.Tensor:
    """Per-step curvature with J taken through the first attention layer.

    Tangent k shifts drift input k by one unit at every step of the window.
    """

    def first_layer(d_in: torch.Tensor) -> torch.Tensor:
        h = drift_embed(x, d_in, model, model.hyper.use_drift_embedding)
        out, _ = temporal_attention_block(h, model.layers[0])
        return out

    columns = []
    for k in range(4):
        tangent = torch.zeros_like(d)
        tangent[..., k] = 1.0
        _, jvp = torch.autograd.functional.jvp(first_layer, d, tangent, create_graph=True)
        columns.append(jvp)
    j = torch.stack(columns, dim=-1)
    return curvature_from_jacobian(j)


def predict_overflow_inputs(delta_hat: torch.Tensor, proximity: torch.Tensor) -> torch.Tensor:
    """[delta_hat, v, a, o] per step; v, a are first/second differences, 0 at the boundary"""
    v = torch.zeros_like(delta_hat)
    a = torch.zeros_like(delta_hat)
    if delta_hat.shape[-1] >= 2:
        v[..., 1:] = delta_hat[..., 1:] - delta_hat[..., :-1]
    if delta_hat.shape[-1] >= 3:
        a[..., 2:] = v[..., 2:] - v[..., 1:-1]
    return torch.stack([delta_hat, v, a, proximity.to(delta_hat.dtype)], dim=-1)


def proximity_flags(tau: np.ndarray, margin: float) -> np.ndarray:
    """1 where the reported time is within margin seconds of (or past) T0"""
    return (np.asarray(tau) >= T0 - margin).astype(np.float64)


def overflow_soon(overflow: np.ndarray, horizon: int) -> np.ndarray:
    """1 where the overflow flag is set now or within the next horizon steps"""
    overflow = np.asarray(overflow, dtype=np.float64)
    if horizon == 0:
        return overflow.copy()
    padded = np.pad(overflow, (0, horizon), mode="edge")
    return np.lib.stride_tricks.sliding_window_view(padded, horizon + 1).max(axis=1)


def forward(batch: Batch, model: STGAT) -> ForwardOutput:
    return model(batch.x, batch.d, batch.adjacency)


def composite_loss(out: ForwardOutput, batch: Batch, model: STGAT) -> LossBreakdown:
    """Reconstruction + per-step CE + drift-gradient L1 + curvature hinge (+ overflow head aux)"""
    hyper = model.hyper
    labels = batch.labels.to(DTYPE)
    if not bool(((labels == 0) | (labels == 1)).all()):
        raise ValidationError("labels must be 0 or 1")
    mean = hyper.loss_reduction == LossReduction.MEAN

    sq = (batch.x - out.x_hat) ** 2
    rec = hyper.lambda_rec * (sq.mean() if mean else sq.sum())

    cls = hyper.lambda_cls * F.binary_cross_entropy_with_logits(out.logits, labels)

    grad_hat = out.delta_hat[..., 1:] - out.delta_hat[..., :-1]
    grad_true = batch.delta[..., 1:] - batch.delta[..., :-1]
    l1 = (grad_hat - grad_true).abs()
    drift = hyper.lambda_delta * (l1.mean() if mean and l1.numel() else l1.sum())

    if hyper.use_curvature_loss:
        if hyper.mu_K is not None:
            mu_k = torch.tensor(hyper.mu_K, dtype=DTYPE)
        elif not hyper.curvature_through_attention:
            # the affine encoder has one curvature for every step; measure it against an orthonormal embedding
            mu_k = torch.zeros((), dtype=DTYPE)
        else:
            nominal = labels == 0
            source = out.k_vals[nominal] if bool(nominal.any()) else out.k_vals
            mu_k = source.mean().detach()
        hinge = torch.clamp(out.k_vals - mu_k, min=0.0) ** 2
        curvature = hyper.lambda_K * (hinge.mean() if mean else hinge.sum())
    else:
        curvature = torch.zeros((), dtype=DTYPE)

    if hyper.overflow_weight > 0:
        inputs = predict_overflow_inputs(out.delta_hat.detach(), batch.proximity)
        overflow = hyper.overflow_weight * F.binary_cross_entropy_with_logits(
            inputs @ model.w_o, batch.overflow_target.to(DTYPE)
        )
    else:
        overflow = torch.zeros((), dtype=DTYPE)

    total = rec + cls + drift + curvature + overflow
    return LossBreakdown(total=total, rec=rec, cls=cls, drift=drift, curvature=curvature, overflow=overflow)


def grad(batch: Batch, model: STGAT, epoch: int = 0, batch_index: int = 0) -> Tuple[Dict[str, torch.Tensor], LossBreakdown]:
    """Exact gradients of the composite loss for every named parameter"""
    model.zero_grad(set_to_none=True)
    losses = composite_loss(forward(batch, model), batch, model)
    if not bool(torch.isfinite(losses.total)):
        raise TrainingDivergedError(epoch, batch_index, losses.as_floats())
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(losses.total, list(params.values()), allow_unused=True)
    return {
        name: (g if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(params.items(), grads)
    }, losses


def descent_step(model: STGAT, grads: Dict[str, torch.Tensor], learning_rate: float) -> None:
    """theta <- theta - lr * grad"""
    with torch.no_grad():
        for name, param in model.named_parameters():
            param.sub_(learning_rate * grads[name])


@dataclass
class SplitTensors:
    """Full-length model inputs for the devices of one split"""

    device_ids: List[int]
    x: torch.Tensor  # (N, L, F)
    d: torch.Tensor  # (N, L, 4)
    adjacency: torch.Tensor
    labels: torch.Tensor
    delta: torch.Tensor
    overflow_target: torch.Tensor
    proximity: torch.Tensor
    tau: np.ndarray  # (N, L) raw reported time

    @property
    def length(self) -> int:
        return int(self.x.shape[1])

    def window(self, start: int, length: int) -> Batch:
        sl = slice(start, start + length)
        return Batch(
            x=self.x[:, sl],
            d=self.d[:, sl],
            adjacency=self.adjacency,
            labels=self.labels[:, sl],
            delta=self.delta[:, sl],
            overflow_target=self.overflow_target[:, sl],
            proximity=self.proximity[:, sl],
        )

    def positions(self, starts: Sequence[int], length: int) -> Batch:
        """Several window positions stacked on a leading batch dimension"""
        index = torch.as_tensor(np.asarray(starts)[:, None] + np.arange(length)[None, :])

        def take(t: torch.Tensor) -> torch.Tensor:
            return t[:, index].transpose(0, 1)

        return Batch(
            x=take(self.x),
            d=take(self.d),
            adjacency=self.adjacency,
            labels=take(self.labels),
            delta=take(self.delta),
            overflow_target=take(self.overflow_target),
            proximity=take(self.proximity),
        )


def split_tensors(
    traces: Sequence[DeviceTrace],
    graph: DeviceGraph,
    stats: NormalizationStats,
    hyper: HyperParams,
) -> SplitTensors:
    xs, ds = [], []
    for tr in traces:
        x_n, d_n = model_inputs(tr.x, tr.d, stats)
        xs.append(x_n)
        ds.append(d_n)
    return SplitTensors(
        device_ids=[tr.device_id for tr in traces],
        x=torch.as_tensor(np.stack(xs), dtype=DTYPE),
        d=torch.as_tensor(np.stack(ds), dtype=DTYPE),
        adjacency=torch.as_tensor(graph.adjacency()),
        labels=torch.as_tensor(np.stack([tr.labels for tr in traces]), dtype=DTYPE),
        delta=torch.as_tensor(np.stack([tr.d[:, 1] for tr in traces]), dtype=DTYPE),
        overflow_target=torch.as_tensor(
            np.stack([overflow_soon(tr.d[:, 3], hyper.overflow_horizon) for tr in traces]), dtype=DTYPE
        ),
        proximity=torch.as_tensor(
            np.stack([proximity_flags(tr.tau, hyper.overflow_margin) for tr in traces]), dtype=DTYPE
        ),
        tau=np.stack([tr.tau for tr in traces]),
    )


@dataclass
class FitResult:
    model: STGAT
    epoch_losses: List[float]
    breakdowns: List[Dict[str, float]]


def fit_tensors(
    tensors: SplitTensors,
    hyper: HyperParams,
    window: int,
    stride: int,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> FitResult:
    """Mini-batch gradient descent; a batch is one window position across all devices"""
    if tensors.length < window:
        raise ValidationError("training traces shorter than window", length=tensors.length, window=window)
    model = STGAT(tensors.x.shape[-1], hyper)
    starts = np.arange(0, tensors.length - window + 1, stride)
    generator = torch.Generator().manual_seed(hyper.seed)

    epoch_losses: List[float] = []
    breakdowns: List[Dict[str, float]] = []
    for epoch in range(hyper.epochs):
        order = torch.randperm(len(starts), generator=generator).tolist()
        totals: Dict[str, float] = {}
        for batch_index, k in enumerate(order):
            grads, losses = grad(tensors.window(int(starts[k]), window), model, epoch, batch_index)
            descent_step(model, grads, hyper.learning_rate)
            for key, value in losses.as_floats().items():
                totals[key] = totals.get(key, 0.0) + value
        mean_terms = {key: value / len(order) for key, value in totals.items()}
        epoch_losses.append(mean_terms["total"])
        breakdowns.append(mean_terms)
        logger.debug("epoch_completed", epoch=epoch, **mean_terms)
        if on_epoch is not None:
            on_epoch(epoch, mean_terms["total"])

    logger.info("training_completed", epochs=hyper.epochs, final_loss=epoch_losses[-1] if epoch_losses else None)
    return FitResult(model=model, epoch_losses=epoch_losses, breakdowns=breakdowns)


def fit(
    dataset: Dataset,
    hyper: HyperParams,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> FitResult:
    train = dataset.split_traces("train")
    if not train:
        raise ValidationError("dataset has an empty train split")
    tensors = split_tensors(train, dataset.split_graph("train"), dataset.manifest.normalization, hyper)
    return fit_tensors(tensors, hyper, dataset.manifest.window, dataset.manifest.stride, on_epoch)


@dataclass
class WindowPredictions:
    device_ids: List[int]
    starts: np.ndarray
    step_posteriors: np.ndarray  # (N, W, T)
    delta_hat: np.ndarray  # (N, W, T)
    window_scores: np.ndarray  # (N, W) max posterior
    window_predictions: np.ndarray  # (N, W)
    window_labels: np.ndarray  # (N, W)


def _run_positions(model: STGAT, tensors: SplitTensors, starts: np.ndarray, window: int, chunk: int) -> ForwardOutput:
    outputs = []
    with torch.no_grad():
        for lo in range(0, len(starts), chunk):
            outputs.append(forward(tensors.positions(starts[lo : lo + chunk], window), model))
    return ForwardOutput(
        logits=torch.cat([o.logits for o in outputs]),
        p_hat=torch.cat([o.p_hat for o in outputs]),
        delta_hat=torch.cat([o.delta_hat for o in outputs]),
        x_hat=torch.cat([o.x_hat for o in outputs]),
        k_vals=torch.cat([o.k_vals for o in outputs]),
    )


def predict_windows(
    model: STGAT,
    dataset: Dataset,
    split: str = "test",
    threshold: float = 0.5,
    chunk: int = 64,
) -> WindowPredictions:
    """Per-window posteriors; a window is flagged when its max step posterior exceeds threshold"""
    tensors = split_tensors(
        dataset.split_traces(split), dataset.split_graph(split), dataset.manifest.normalization, model.hyper
    )
    window, stride = dataset.manifest.window, dataset.manifest.stride
    starts = np.arange(0, tensors.length - window + 1, stride)
    out = _run_positions(model, tensors, starts, window, chunk)
    # (W, N, T) -> (N, W, T)
    posteriors = out.p_hat.transpose(0, 1).numpy()
    labels = tensors.labels[:, torch.as_tensor(starts[:, None] + np.arange(window)[None, :])].numpy()
    scores = posteriors.max(axis=2)
    return WindowPredictions(
        device_ids=tensors.device_ids,
        starts=starts,
        step_posteriors=posteriors,
        delta_hat=out.delta_hat.transpose(0, 1).numpy(),
        window_scores=scores,
        window_predictions=(scores > threshold).astype(np.int64),
        window_labels=labels.max(axis=2).astype(np.int64),
    )


@dataclass
class StreamOutputs:
    """Last-step model outputs for every position where the window is full"""

    device_ids: List[int]
    first_step: int  # step index of the first output (window - 1)
    p_hat: np.ndarray  # (N, L - window + 1)
    delta_hat: np.ndarray
    proximity: np.ndarray
    tau: np.ndarray  # (N, L - window + 1) raw reported time at those steps
    labels: np.ndarray


def predict_stream(model: STGAT, tensors: SplitTensors, window: int, chunk: int = 128) -> StreamOutputs:
    """Slide a stride-1 window over the split and keep each window's last step"""
    if tensors.length < window:
        raise ValidationError("trace shorter than window", length=tensors.length, window=window)
    starts = np.arange(0, tensors.length - window + 1)
    out = _run_positions(model, tensors, starts, window, chunk)
    steps = torch.as_tensor(starts + window - 1)
    return StreamOutputs(
        device_ids=tensors.device_ids,
        first_step=window - 1,
        p_hat=out.p_hat[..., -1].transpose(0, 1).numpy(),
        delta_hat=out.delta_hat[..., -1].transpose(0, 1).numpy(),
        proximity=tensors.proximity[:, steps].numpy(),
        tau=tensors.tau[:, steps.numpy()],
        labels=tensors.labels[:, steps].numpy().astype(np.int64),
    )


@dataclass
class Checkpoint:
    model: STGAT
    normalization: NormalizationStats
    window: int
    dt: float

    @property
    def hyper(self) -> HyperParams:
        return self.model.hyper


def save_checkpoint(path: Path, model: STGAT, normalization: NormalizationStats, window: int, dt: float) -> None:
    """JSON container: shapes plus row-major float64 values (repr round-trips exactly)"""
    params = {
        name: {"shape": list(p.shape), "data": p.detach().reshape(-1).tolist()}
        for name, p in model.named_parameters()
    }
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "n_features": model.n_features,
        "window": window,
        "dt": dt,
        "hyper": model.hyper.model_dump(mode="json"),
        "normalization": normalization.model_dump(mode="json"),
        "params": params,
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
    logger.info("checkpoint_saved", path=str(path))


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError("checkpoint not found", path=str(path))
    payload = json.loads(path.read_text(encoding="utf-8"))
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise DatasetFormatError("unsupported checkpoint version", version=payload.get("format_version"))

    hyper = HyperParams.model_validate(payload["hyper"])
    model = STGAT(int(payload["n_features"]), hyper)
    state = dict(model.named_parameters())
    with torch.no_grad():
        for name, entry in payload["params"].items():
            if name not in state:
                raise DatasetFormatError("unknown parameter in checkpoint", name=name)
            values = torch.tensor(entry["data"], dtype=DTYPE).reshape(entry["shape"])
            if values.shape != state[name].shape:
                raise DatasetFormatError("parameter shape mismatch", name=name)
            state[name].copy_(values)
    return Checkpoint(
        model=model,
        normalization=NormalizationStats.model_validate(payload["normalization"]),
        window=int(payload["window"]),
        dt=float(payload["dt"]),
    )
