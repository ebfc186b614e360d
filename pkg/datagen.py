"""
Drift-aware dataset construction.

Synthesizes nominal physical telemetry, runs each device clock through its
timing scenario, derives the time-aware features and diagnostics, builds the
device graph, splits devices and windows, and reads/writes datasets.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial.distance import cdist

from clockdyn import (
    T0,
    ClockParams,
    ClockSimulator,
    TimeConstants,
    device_rng,
    wrap32,
)
from errors import DatasetFormatError, ValidationError

if TYPE_CHECKING:
    from config import GenerateConfig

logger = structlog.get_logger(__name__)

FORMAT_VERSION = 1
PHYSICAL_FEATURES = ["voltage", "current", "temperature", "humidity", "power"]
DRIFT_INPUTS = ["dt", "delta", "eta", "overflow"]
TIME_FEATURES = ["timestamp_drift", "drift_rate", "jitter_ms", "ntp_offset_ms", "epoch_overflow_flag"]
SPLITS = ("train", "val", "test")
DEFAULT_START_TIME = 1_700_000_000.0


class ScenarioKind(str, Enum):
    NOMINAL = "nominal"
    DRIFT_ESCALATION = "drift_escalation"
    OFFSET_SHOCK = "offset_shock"
    EPOCH_OVERFLOW = "epoch_overflow"
    STEALTHY_DRIFT = "stealthy_drift"


class Topology(str, Enum):
    RING = "ring"
    GRID = "grid"
    K_NEAREST = "k_nearest"
    EXPLICIT = "explicit"


class PhysicalConfig(BaseModel):
    """Nominal cyber-physical signal generator settings"""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    n_features: int = Field(default=5, ge=1)
    period: float = Field(default=1440.0, gt=0, description="Diurnal cycle length in steps")
    voltage_band: Tuple[float, float] = (218.0, 223.0)
    temp_alpha: float = 0.1
    temp_beta: float = 20.0
    noise_scale: float = Field(default=0.5, ge=0)
    base_load: float = Field(default=50.0, gt=0)
    load_amplitude: float = Field(default=20.0, ge=0)
    humidity_mean: float = 45.0
    humidity_amplitude: float = 10.0

    @model_validator(mode="after")
    def _check_band(self) -> "PhysicalConfig":
        low, high = self.voltage_band
        if not low < high:
            raise ValueError("voltage_band low must be below high")
        if self.load_amplitude >= self.base_load:
            raise ValueError("load_amplitude must stay below base_load (power must remain positive)")
        return self


class ScenarioSpec(BaseModel):
    """Timing perturbation applied to one device from onset onward"""

    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    kind: ScenarioKind = ScenarioKind.NOMINAL
    onset: int = Field(default=0, ge=0)
    magnitude: float = 0.0
    eps_t: float = Field(default=0.01, ge=0)
    eps_d: float = Field(default=0.001, ge=0)

    @model_validator(mode="after")
    def _check_kind(self) -> "ScenarioSpec":
        # offset shocks are signed; every other magnitude is a scale
        if self.kind != ScenarioKind.OFFSET_SHOCK and self.magnitude < 0:
            raise ValueError(f"{self.kind.value} magnitude must be >= 0")
        if self.kind == ScenarioKind.DRIFT_ESCALATION and self.magnitude <= 0:
            raise ValueError("drift_escalation needs a positive sigma multiplier")
        if self.kind == ScenarioKind.STEALTHY_DRIFT and self.eps_t < self.eps_d:
            raise ValueError("stealthy_drift requires eps_t >= eps_d")
        return self

    @property
    def perturbed(self) -> bool:
        return self.kind != ScenarioKind.NOMINAL


def scenario_controls(spec: ScenarioSpec, step: int) -> Dict[str, Any]:
    """Keyword controls for ClockSimulator.step at a given step"""
    active = step >= spec.onset
    if spec.kind == ScenarioKind.DRIFT_ESCALATION and active:
        return {"sigma_scale": spec.magnitude}
    if spec.kind == ScenarioKind.OFFSET_SHOCK and step == spec.onset:
        return {"offset_kick": spec.magnitude}
    if spec.kind == ScenarioKind.STEALTHY_DRIFT:
        ramp = min(spec.magnitude, spec.eps_d) if active else 0.0
        return {"drift_ramp": ramp, "stealth": (spec.eps_t, spec.eps_d)}
    return {}


def scenario_start_time(spec: ScenarioSpec, default_start: float, dt: float) -> float:
    """True-time origin; overflow devices start so the flag rises exactly at onset"""
    if spec.kind == ScenarioKind.EPOCH_OVERFLOW:
        return T0 - (spec.onset - 1.5) * dt
    return default_start


@dataclass
class TraceRow:
    t: int
    x: np.ndarray
    d: np.ndarray
    tau: float
    psi: float
    time_features: np.ndarray
    label: int
    k_diag: float


@dataclass
class DeviceTrace:
    """Columnar trace of one device; rows() yields the per-step view"""

    device_id: int
    scenario: ScenarioSpec
    x: np.ndarray  # (T, F)
    d: np.ndarray  # (T, 4): dt, delta, eta, overflow
    tau: np.ndarray
    psi: np.ndarray
    time_features: np.ndarray  # (T, 5)
    labels: np.ndarray
    k_diag: np.ndarray

    def __len__(self) -> int:
        return int(self.tau.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.x.shape[1])

    def rows(self) -> Iterator[TraceRow]:
        for t in range(len(self)):
            yield TraceRow(
                t=t,
                x=self.x[t],
                d=self.d[t],
                tau=float(self.tau[t]),
                psi=float(self.psi[t]),
                time_features=self.time_features[t],
                label=int(self.labels[t]),
                k_diag=float(self.k_diag[t]),
            )

    def step_features(self) -> np.ndarray:
        """(T, F + 4 + 5) matrix in window column order"""
        return np.concatenate([self.x, self.d, self.time_features], axis=1)


@dataclass
class DeviceGraph:
    n_nodes: int
    edges: List[Tuple[int, int, float]] = field(default_factory=list)
    symmetric: bool = True

    def __post_init__(self) -> None:
        for i, j, w in self.edges:
            if not (0 <= i < self.n_nodes and 0 <= j < self.n_nodes):
                raise ValidationError("edge index out of range", edge=(i, j), n_nodes=self.n_nodes)
            if w < 0:
                raise ValidationError("edge weight must be >= 0", edge=(i, j), weight=w)

    def neighbors(self, i: int) -> List[int]:
        out = set()
        for a, b, _ in self.edges:
            if a == i:
                out.add(b)
            if self.symmetric and b == i:
                out.add(a)
        return sorted(out)

    def adjacency(self, self_loops_for_isolated: bool = True) -> np.ndarray:
        """Boolean neighbourhood mask; row i marks the nodes i attends to"""
        mask = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        for i, j, _ in self.edges:
            mask[i, j] = True
            if self.symmetric:
                mask[j, i] = True
        if self_loops_for_isolated:
            isolated = ~mask.any(axis=1)
            mask[isolated, isolated] = True
        return mask

    def subgraph(self, nodes: Sequence[int]) -> "DeviceGraph":
        """Induced subgraph relabelled to 0..len(nodes)-1 in the given order"""
        index = {node: k for k, node in enumerate(nodes)}
        edges = [(index[i], index[j], w) for i, j, w in self.edges if i in index and j in index]
        return DeviceGraph(n_nodes=len(nodes), edges=edges, symmetric=self.symmetric)

    def relabel(self, permutation: Sequence[int]) -> "DeviceGraph":
        """Graph under new labels: node i becomes permutation[i]"""
        edges = [(int(permutation[i]), int(permutation[j]), w) for i, j, w in self.edges]
        return DeviceGraph(n_nodes=self.n_nodes, edges=edges, symmetric=self.symmetric)

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n_nodes, "edges": [[i, j, w] for i, j, w in self.edges]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DeviceGraph":
        edges = [(int(i), int(j), float(w)) for i, j, w in data["edges"]]
        return cls(n_nodes=int(data["n"]), edges=edges)


class NormalizationStats(BaseModel):
    columns: List[str]
    mean: List[float]
    std: List[float]


class DatasetManifest(BaseModel):
    seed: int
    n_devices: int
    length: int
    window: int
    stride: int
    dt: float
    n_features: int
    splits: Dict[str, List[int]]
    normalization: NormalizationStats
    scenarios: List[ScenarioSpec]
    graph: Dict[str, Any]
    format_version: int = FORMAT_VERSION


@dataclass
class WindowSet:
    device_ids: List[int]
    starts: np.ndarray
    window: int
    stride: int
    features: np.ndarray  # (n_devices, n_windows, window, F + 9)
    step_labels: np.ndarray  # (n_devices, n_windows, window)
    labels: np.ndarray  # (n_devices, n_windows), any-step rule

    @property
    def n_windows(self) -> int:
        return int(self.starts.shape[0])


@dataclass
class Dataset:
    manifest: DatasetManifest
    traces: List[DeviceTrace]
    graph: DeviceGraph

    def split_ids(self, split: str) -> List[int]:
        if split not in self.manifest.splits:
            raise ValidationError(f"unknown split '{split}'")
        return list(self.manifest.splits[split])

    def split_traces(self, split: str) -> List[DeviceTrace]:
        by_id = {tr.device_id: tr for tr in self.traces}
        return [by_id[i] for i in self.split_ids(split)]

    def split_graph(self, split: str) -> DeviceGraph:
        return self.graph.subgraph(self.split_ids(split))

    def windows(self, split: str) -> WindowSet:
        return make_windows(self.split_traces(split), self.manifest.window, self.manifest.stride)


def _physical_seed(seed: int, device_id: int) -> int:
    return int(np.random.SeedSequence([seed, device_id, 1]).generate_state(1)[0])


def synth_physical(config: PhysicalConfig, length: int, seed: int) -> np.ndarray:
    """Nominal telemetry: periodic load, banded voltage, coupled temperature"""
    if length <= 0:
        raise ValidationError("length must be positive", length=length)

    rng = np.random.default_rng(seed)
    steps = np.arange(length, dtype=np.float64)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    cycle = np.sin(2.0 * np.pi * steps / config.period + phase)
    noise = config.noise_scale

    power = config.base_load + config.load_amplitude * cycle + noise * rng.standard_normal(length)
    power = np.maximum(power, 1e-3)

    low, high = config.voltage_band
    mid, half = (low + high) / 2.0, (high - low) / 2.0
    voltage = mid - 0.5 * half * cycle + 0.1 * noise * rng.standard_normal(length)
    voltage = np.clip(voltage, low, high)

    current = power / voltage
    temperature = config.temp_alpha * power + config.temp_beta + 0.1 * noise * rng.standard_normal(length)
    humidity = config.humidity_mean - config.humidity_amplitude * cycle + noise * rng.standard_normal(length)

    columns = [voltage, current, temperature, humidity, power]
    for k in range(len(columns), config.n_features):
        # extra channels: further harmonics of the load cycle
        harmonic = np.sin(2.0 * np.pi * (k - 3) * steps / config.period + phase)
        columns.append(harmonic + noise * rng.standard_normal(length))
    return np.stack(columns[: config.n_features], axis=1)


def diagnostic_matrix(n_features: int, seed: int) -> np.ndarray:
    """Fixed data-side embedding matrix used only for the z/K diagnostics"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1A6]))
    return rng.uniform(-0.5, 0.5, size=(n_features, 4))


def diagnostic_embedding(x: np.ndarray, d: np.ndarray, w_diag: np.ndarray) -> Tuple[np.ndarray, float]:
    """z = x + W d and K = ||W^T W - I||_F"""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    w_diag = np.asarray(w_diag, dtype=np.float64)
    if w_diag.shape != (x.shape[-1], 4) or d.shape[-1] != 4:
        raise ValidationError("shape mismatch", x=x.shape, d=d.shape, w_diag=w_diag.shape)
    z = x + d @ w_diag.T
    k = float(np.linalg.norm(w_diag.T @ w_diag - np.eye(4), ord="fro"))
    return z, k


def build_device_trace(
    phys: np.ndarray,
    clock: ClockParams,
    scenario: ScenarioSpec,
    constants: TimeConstants,
    seed: int,
    device_id: int = 0,
    start_time: float = DEFAULT_START_TIME,
    w_diag: Optional[np.ndarray] = None,
) -> DeviceTrace:
    """Run one device through its clock and scenario"""
    phys = np.asarray(phys, dtype=np.float64)
    if phys.ndim != 2 or phys.shape[0] == 0:
        raise ValidationError("physical matrix must be non-empty (T, F)", shape=phys.shape)
    length = phys.shape[0]
    if scenario.perturbed and scenario.onset >= length:
        raise ValidationError("scenario onset beyond trace length", onset=scenario.onset, length=length)

    dt = constants.dt
    origin = scenario_start_time(scenario, start_time, dt)
    sim = ClockSimulator(clock, device_rng(seed, device_id), origin, constants)

    d = np.empty((length, 4), dtype=np.float64)
    tau = np.empty(length, dtype=np.float64)
    psi = np.empty(length, dtype=np.float64)
    for step in range(length):
        t = origin + step * dt
        out = sim.step(t, **scenario_controls(scenario, step))
        d[step] = (dt, out.delta, out.eta, out.overflow)
        tau[step] = out.tau
        psi[step] = out.tau - t

    labels = np.zeros(length, dtype=np.int64)
    if scenario.perturbed:
        labels[scenario.onset :] = 1

    if w_diag is None:
        w_diag = diagnostic_matrix(phys.shape[1], seed)
    _, k = diagnostic_embedding(phys[0], d[0], w_diag)

    trace = DeviceTrace(
        device_id=device_id,
        scenario=scenario,
        x=phys,
        d=d,
        tau=tau,
        psi=psi,
        time_features=np.zeros((length, 5), dtype=np.float64),
        labels=labels,
        k_diag=np.full(length, k),
    )
    return compute_time_features(trace, dt)


def compute_time_features(trace: DeviceTrace, dt: float) -> DeviceTrace:
    """Fill the five time-aware feature columns; step 0 has no predecessor"""
    length = len(trace)
    feats = np.zeros((length, 5), dtype=np.float64)
    feats[:, 0] = trace.psi
    if length >= 2:
        feats[1:, 1] = np.diff(trace.d[:, 1]) / dt
        feats[1:, 2] = np.abs(np.diff(trace.tau) - dt) * 1000.0
    feats[:, 3] = trace.d[:, 2] * 1000.0
    feats[:, 4] = trace.d[:, 3]
    trace.time_features = feats
    return trace


def wire_view(tau: np.ndarray) -> np.ndarray:
    """Reported time as a signed 32-bit second count plus fraction"""
    seconds = np.floor(tau)
    wrapped = np.array([wrap32(int(s)) for s in seconds], dtype=np.float64)
    return wrapped + (tau - seconds)


def reindex_by_reported_time(trace: DeviceTrace, wire: bool = False) -> List[Tuple[float, np.ndarray]]:
    """Samples keyed and ordered by reported time (stable for ties)"""
    tau = wire_view(trace.tau) if wire else trace.tau
    order = np.argsort(tau, kind="stable")
    return [(float(tau[k]), trace.x[k]) for k in order]


def build_graph(
    n_devices: int,
    topology: Topology = Topology.K_NEAREST,
    k: int = 2,
    seed: int = 0,
    edges: Optional[Sequence[Tuple[int, int, float]]] = None,
) -> DeviceGraph:
    """Connected undirected device graph with weights in (0, 1]"""
    if n_devices < 1:
        raise ValidationError("n_devices must be >= 1", n_devices=n_devices)
    topology = Topology(topology)
    if n_devices == 1:
        return DeviceGraph(n_nodes=1, edges=[])

    if topology == Topology.EXPLICIT:
        if edges is None:
            raise ValidationError("explicit topology needs an edge list")
        return DeviceGraph(n_nodes=n_devices, edges=[(int(i), int(j), float(w)) for i, j, w in edges])

    pairs: Dict[Tuple[int, int], float] = {}

    def add(i: int, j: int, w: float) -> None:
        if i != j:
            pairs.setdefault((min(i, j), max(i, j)), w)

    if topology == Topology.RING:
        for i in range(n_devices):
            add(i, (i + 1) % n_devices, 1.0)
    elif topology == Topology.GRID:
        cols = int(np.ceil(np.sqrt(n_devices)))
        for i in range(n_devices):
            r, c = divmod(i, cols)
            if c + 1 < cols and i + 1 < n_devices:
                add(i, i + 1, 1.0)
            if i + cols < n_devices:
                add(i, i + cols, 1.0)
    else:
        if k >= n_devices:
            raise ValidationError("k must be smaller than n_devices", k=k, n_devices=n_devices)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6A7]))
        positions = rng.random((n_devices, 2))
        dist = cdist(positions, positions)
        np.fill_diagonal(dist, np.inf)
        for i in range(n_devices):
            for j in np.argsort(dist[i], kind="stable")[:k]:
                add(i, int(j), float(np.exp(-dist[i, j])))
        # join components through their closest pair until connected
        while True:
            rows = [i for i, _ in pairs] + [j for _, j in pairs]
            cols_ = [j for _, j in pairs] + [i for i, _ in pairs]
            matrix = csr_matrix((np.ones(len(rows)), (rows, cols_)), shape=(n_devices, n_devices))
            n_comp, comp = connected_components(matrix, directed=False)
            if n_comp == 1:
                break
            masked = np.where(comp[:, None] == comp[None, :], np.inf, dist)
            i, j = np.unravel_index(np.argmin(masked), masked.shape)
            add(int(i), int(j), float(np.exp(-dist[i, j])))

    return DeviceGraph(n_nodes=n_devices, edges=[(i, j, w) for (i, j), w in sorted(pairs.items())])


def make_windows(traces: Sequence[DeviceTrace], window: int = 60, stride: int = 30) -> WindowSet:
    """Overlapping windows; a window is anomalous if any step in it is"""
    if window <= 0 or stride <= 0:
        raise ValidationError("window and stride must be positive", window=window, stride=stride)
    if not traces:
        raise ValidationError("no traces to window")
    lengths = {len(tr) for tr in traces}
    if len(lengths) != 1:
        raise ValidationError("traces must share one length", lengths=sorted(lengths))
    length = lengths.pop()
    if length < window:
        raise ValidationError("trace shorter than window", length=length, window=window)

    starts = np.arange(0, length - window + 1, stride)
    features = np.stack([_windowed(tr.step_features(), window, stride) for tr in traces])
    step_labels = np.stack([_windowed(tr.labels[:, None], window, stride)[..., 0] for tr in traces])
    return WindowSet(
        device_ids=[tr.device_id for tr in traces],
        starts=starts,
        window=window,
        stride=stride,
        features=features,
        step_labels=step_labels,
        labels=step_labels.max(axis=2),
    )


def _windowed(matrix: np.ndarray, window: int, stride: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(matrix, window, axis=0)[::stride]
    return np.moveaxis(view, -1, 1)


def split_by_device(
    device_ids: Sequence[int],
    fractions: Sequence[float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> Dict[str, List[int]]:
    """Shuffled device-level partition with every split non-empty"""
    ids = sorted(int(i) for i in device_ids)
    n = len(ids)
    if n < 3:
        raise ValidationError("at least 3 devices are needed for a train/val/test split", n_devices=n)

    raw = np.asarray(fractions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    remainders = raw - counts
    for k in np.argsort(-remainders, kind="stable")[: n - counts.sum()]:
        counts[k] += 1
    for k in range(3):
        while counts[k] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[k] += 1

    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(ids)
    bounds = np.cumsum(counts)
    return {
        "train": sorted(int(i) for i in order[: bounds[0]]),
        "val": sorted(int(i) for i in order[bounds[0] : bounds[1]]),
        "test": sorted(int(i) for i in order[bounds[1] :]),
    }


def normalized_columns(n_features: int) -> List[str]:
    """Continuous columns that get z-scored (binary overflow columns excluded)"""
    return [f"x_{k + 1}" for k in range(n_features)] + DRIFT_INPUTS[:3] + TIME_FEATURES[:4]


def _continuous(trace: DeviceTrace) -> np.ndarray:
    return np.concatenate([trace.x, trace.d[:, :3], trace.time_features[:, :4]], axis=1)


def normalize_fit(traces: Sequence[DeviceTrace]) -> NormalizationStats:
    """Per-column mean/std (population) over the given (training) traces"""
    if not traces:
        raise ValidationError("cannot fit normalization on zero traces")
    stacked = np.concatenate([_continuous(tr) for tr in traces], axis=0)
    return NormalizationStats(
        columns=normalized_columns(traces[0].n_features),
        mean=stacked.mean(axis=0).tolist(),
        std=stacked.std(axis=0).tolist(),
    )


def _scale(values: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    # zero std: center only
    safe = np.where(std > 0, std, 1.0)
    return (values - mean) / safe


def normalize_apply(trace: DeviceTrace, stats: NormalizationStats) -> DeviceTrace:
    """Copy of the trace with continuous columns z-scored"""
    f = trace.n_features
    if len(stats.columns) != f + 7:
        raise ValidationError("normalization stats do not match feature count", n_features=f)
    scaled = _scale(_continuous(trace), np.asarray(stats.mean), np.asarray(stats.std))
    d = trace.d.copy()
    d[:, :3] = scaled[:, f : f + 3]
    time_features = trace.time_features.copy()
    time_features[:, :4] = scaled[:, f + 3 :]
    return replace(trace, x=scaled[:, :f], d=d, time_features=time_features)


def model_inputs(
    x: np.ndarray, d: np.ndarray, stats: NormalizationStats
) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized (X, D) model inputs from raw physical and drift columns"""
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    f = x.shape[-1]
    mean = np.asarray(stats.mean)
    std = np.asarray(stats.std)
    x_n = _scale(x, mean[:f], std[:f])
    d_n = d.copy()
    d_n[..., :3] = _scale(d[..., :3], mean[f : f + 3], std[f : f + 3])
    return x_n, d_n


def assign_scenarios(
    splits: Dict[str, List[int]],
    length: int,
    kinds: Sequence[ScenarioKind],
    perturbed_fraction: float,
    onset_range: Sequence[float],
    magnitudes: Dict[str, float],
    eps_t: float,
    eps_d: float,
    seed: int,
) -> Dict[int, ScenarioSpec]:
    """Stratified scenario assignment: each split gets its share of perturbed devices"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5CE]))
    specs: Dict[int, ScenarioSpec] = {}
    lo, hi = onset_range
    for split in SPLITS:
        members = list(rng.permutation(splits[split])) if splits[split] else []
        n = len(members)
        n_perturbed = int(round(perturbed_fraction * n)) if kinds else 0
        if kinds and perturbed_fraction > 0 and split in ("train", "test") and n >= 2:
            n_perturbed = max(n_perturbed, 1)
        n_perturbed = min(n_perturbed, n)
        offset = int(rng.integers(len(kinds))) if kinds else 0
        for rank, device in enumerate(members):
            if rank < n_perturbed:
                kind = ScenarioKind(kinds[(offset + rank) % len(kinds)])
                onset = int(rng.integers(int(lo * length), int(hi * length) + 1))
                onset = min(max(onset, 2), length - 1)
                specs[int(device)] = ScenarioSpec(
                    kind=kind,
                    onset=onset,
                    magnitude=float(magnitudes.get(kind.value, 0.0)),
                    eps_t=eps_t,
                    eps_d=eps_d,
                )
            else:
                specs[int(device)] = ScenarioSpec()
    return specs


def generate_dataset(config: "GenerateConfig") -> Dataset:
    """Build a full dataset; per-device substreams make worker count irrelevant"""
    constants = TimeConstants(dt=config.dt)
    device_ids = list(range(config.n_devices))
    splits = split_by_device(device_ids, config.split_fractions, config.seed)
    scenarios = assign_scenarios(
        splits,
        config.length,
        config.scenarios,
        config.perturbed_fraction,
        config.onset_range,
        config.magnitudes,
        config.eps_t,
        config.eps_d,
        config.seed,
    )
    w_diag = diagnostic_matrix(config.physical.n_features, config.seed)

    def build(device_id: int) -> DeviceTrace:
        phys = synth_physical(config.physical, config.length, _physical_seed(config.seed, device_id))
        return build_device_trace(
            phys,
            config.clock,
            scenarios[device_id],
            constants,
            config.seed,
            device_id=device_id,
            start_time=config.start_time,
            w_diag=w_diag,
        )

    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        traces = list(pool.map(build, device_ids))

    graph = build_graph(config.n_devices, config.topology, k=config.k, seed=config.seed)
    stats = normalize_fit([traces[i] for i in splits["train"]])
    manifest = DatasetManifest(
        seed=config.seed,
        n_devices=config.n_devices,
        length=config.length,
        window=config.window,
        stride=config.stride,
        dt=config.dt,
        n_features=config.physical.n_features,
        splits=splits,
        normalization=stats,
        scenarios=[scenarios[i] for i in device_ids],
        graph=graph.to_dict(),
    )
    logger.info(
        "dataset_generated",
        devices=config.n_devices,
        length=config.length,
        perturbed=sum(1 for s in manifest.scenarios if s.perturbed),
        splits={k: len(v) for k, v in splits.items()},
    )
    return Dataset(manifest=manifest, traces=traces, graph=graph)


def trace_columns(n_features: int) -> List[str]:
    return (
        ["device_id", "t", "tau"]
        + [f"x_{k + 1}" for k in range(n_features)]
        + DRIFT_INPUTS
        + TIME_FEATURES
        + ["label", "k_diag"]
    )


_INT_COLUMNS = ("device_id", "t", "overflow", "epoch_overflow_flag", "label")


def traces_frame(traces: Sequence[DeviceTrace]) -> pd.DataFrame:
    frames = []
    for tr in traces:
        n = len(tr)
        data: Dict[str, Any] = {"device_id": np.full(n, tr.device_id), "t": np.arange(n), "tau": tr.tau}
        for k in range(tr.n_features):
            data[f"x_{k + 1}"] = tr.x[:, k]
        data["dt"] = tr.d[:, 0]
        data["delta"] = tr.d[:, 1]
        data["eta"] = tr.d[:, 2]
        data["overflow"] = tr.d[:, 3].astype(np.int64)
        for k, name in enumerate(TIME_FEATURES):
            data[name] = tr.time_features[:, k]
        data["epoch_overflow_flag"] = tr.time_features[:, 4].astype(np.int64)
        data["label"] = tr.labels
        data["k_diag"] = tr.k_diag
        frames.append(pd.DataFrame(data))
    return pd.concat(frames, ignore_index=True)


def save_dataset(dataset: Dataset, path: Path) -> None:
    """Write manifest.json and traces.csv under path"""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = dataset.manifest.model_copy(update={"graph": dataset.graph.to_dict()})
    (path / "manifest.json").write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    frame = traces_frame(dataset.traces)
    frame.to_csv(path / "traces.csv", index=False, lineterminator="\n")
    logger.info("dataset_saved", path=str(path), rows=len(frame))


def _read_numeric_csv(csv_path: Path, required: Sequence[str]) -> pd.DataFrame:
    if not csv_path.exists():
        raise DatasetFormatError("file not found", path=str(csv_path))
    frame = pd.read_csv(csv_path, float_precision="round_trip")
    for column in required:
        if column not in frame.columns:
            raise DatasetFormatError(f"missing column '{column}'", column=column, path=str(csv_path))
    return frame


def _coerce_numeric(frame: pd.DataFrame, columns: Sequence[str], csv_path: Path) -> pd.DataFrame:
    for column in columns:
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = values.isna() & frame[column].notna()
        if bad.any():
            # header is line 1
            line = int(np.flatnonzero(bad.to_numpy())[0]) + 2
            raise DatasetFormatError("malformed value", column=column, line=line, path=str(csv_path))
        frame[column] = values
    return frame


def load_dataset(path: Path) -> Dataset:
    """Inverse of save_dataset"""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DatasetFormatError("manifest.json not found", path=str(path))
    raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    version = raw.get("format_version")
    if version != FORMAT_VERSION:
        raise DatasetFormatError("unsupported dataset format version", version=version, expected=FORMAT_VERSION)
    manifest = DatasetManifest.model_validate(raw)

    csv_path = path / "traces.csv"
    columns = trace_columns(manifest.n_features)
    frame = _coerce_numeric(_read_numeric_csv(csv_path, columns), columns, csv_path)
    missing = frame[columns].isna().to_numpy()
    if missing.any():
        row, col = np.argwhere(missing)[0]
        raise DatasetFormatError("empty value", column=columns[col], line=int(row) + 2, path=str(csv_path))

    x_cols = [f"x_{k + 1}" for k in range(manifest.n_features)]
    traces = []
    for device_id, group in frame.groupby("device_id", sort=True):
        group = group.sort_values("t", kind="stable")
        device_id = int(device_id)
        d = group[DRIFT_INPUTS].to_numpy(dtype=np.float64)
        traces.append(
            DeviceTrace(
                device_id=device_id,
                scenario=manifest.scenarios[device_id],
                x=group[x_cols].to_numpy(dtype=np.float64),
                d=d,
                tau=group["tau"].to_numpy(dtype=np.float64),
                psi=group["timestamp_drift"].to_numpy(dtype=np.float64),
                time_features=group[TIME_FEATURES].to_numpy(dtype=np.float64),
                labels=group["label"].to_numpy(dtype=np.int64),
                k_diag=group["k_diag"].to_numpy(dtype=np.float64),
            )
        )
    if len(traces) != manifest.n_devices:
        raise DatasetFormatError("device count does not match manifest", found=len(traces), expected=manifest.n_devices)
    return Dataset(manifest=manifest, traces=traces, graph=DeviceGraph.from_dict(manifest.graph))


class ExternalColumnMap(BaseModel):
    """Column names of an external telemetry CSV"""

    timestamp: str
    features: List[str] = Field(min_length=1)
    device: Optional[str] = None


def load_external_csv(
    path: Path,
    column_map: ExternalColumnMap,
    clock: Optional[ClockParams] = None,
    scenario: Optional[ScenarioSpec] = None,
    seed: int = 0,
    dt: Optional[float] = None,
) -> List[DeviceTrace]:
    """Ingest external telemetry and overlay simulated clock distortion"""
    path = Path(path)
    required = [column_map.timestamp, *column_map.features]
    if column_map.device:
        required.append(column_map.device)
    frame = _coerce_numeric(_read_numeric_csv(path, required), required, path)

    if column_map.device is None:
        frame["__device"] = 0
        device_col = "__device"
    else:
        device_col = column_map.device

    clock = clock or ClockParams()
    scenario = scenario or ScenarioSpec()
    traces = []
    for device_id, group in frame.groupby(device_col, sort=True):
        group = group.sort_values(column_map.timestamp, kind="stable")
        features = group[column_map.features].ffill().bfill()
        empty = [c for c in column_map.features if features[c].isna().all()]
        if empty:
            raise DatasetFormatError("column has no values", column=empty[0], path=str(path))
        stamps = group[column_map.timestamp].to_numpy(dtype=np.float64)
        if np.isnan(stamps).any():
            line = int(group.index[np.isnan(stamps)][0]) + 2
            raise DatasetFormatError("empty timestamp", column=column_map.timestamp, line=line, path=str(path))
        step = dt if dt is not None else (float(np.median(np.diff(stamps))) if len(stamps) > 1 else 1.0)
        if step <= 0:
            raise DatasetFormatError("timestamps do not advance", column=column_map.timestamp, path=str(path))
        traces.append(
            build_device_trace(
                features.to_numpy(dtype=np.float64),
                clock,
                scenario,
                TimeConstants(dt=step),
                seed,
                device_id=int(device_id),
                start_time=float(stamps[0]),
            )
        )
    logger.info("external_csv_loaded", path=str(path), devices=len(traces))
    return traces


def feature_correlation(traces: Sequence[DeviceTrace]) -> pd.DataFrame:
    """Pearson correlation of power, voltage, temperature and jitter"""
    if not traces or traces[0].n_features < 5:
        raise ValidationError("correlation needs the five standard physical features")
    frame = pd.DataFrame(
        {
            "power": np.concatenate([tr.x[:, 4] for tr in traces]),
            "voltage": np.concatenate([tr.x[:, 0] for tr in traces]),
            "temperature": np.concatenate([tr.x[:, 2] for tr in traces]),
            "jitter_ms": np.concatenate([tr.time_features[:, 2] for tr in traces]),
        }
    )
    return frame.corr(method="pearson")
