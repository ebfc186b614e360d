"""
Online drift and overflow detector.

Per-step posteriors become log-likelihood ratios, accumulated into a score
that is compared against an adaptive threshold. A decision fires only when the
score gate is open and either the drift-consistency check or the overflow
probability fires as well.
"""

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Deque, Dict, Iterable, List, Optional, Sequence

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit

from clockdyn import T0
from datagen import Dataset
from errors import DatasetFormatError, ValidationError
from stgat import Checkpoint, predict_stream, split_tensors

logger = structlog.get_logger(__name__)

P_CLAMP = 1e-12

REASON_SCORE = "score"
REASON_DRIFT = "drift_consistency"
REASON_OVERFLOW = "overflow"


class DetectorParams(BaseModel):
    model_config = ConfigDict(frozen=True, allow_inf_nan=False)

    theta0: float = 5.0
    gamma: float = Field(default=1.0, ge=0)
    var_window: int = Field(default=10, ge=2)
    score_window: int = Field(default=10, ge=0, description="0 selects the cumulative score")
    eps_delta: float = Field(default=0.01, gt=0)
    eps_o: float = Field(default=0.9, gt=0, lt=1)
    overflow_margin: float = Field(default=10.0, ge=0)
    dt: float = Field(default=1.0, gt=0)


@dataclass
class DetectorState:
    score_window: int
    var_window: int
    llr_buffer: Deque[float] = field(init=False)
    score_history: Deque[float] = field(init=False)
    cumulative: float = 0.0
    prev_delta_hat: Optional[float] = None
    prev_v: Optional[float] = None
    prev_tau: Optional[float] = None
    step: int = 0

    def __post_init__(self) -> None:
        self.llr_buffer = deque(maxlen=self.score_window or None)
        self.score_history = deque(maxlen=self.var_window)

    @classmethod
    def from_params(cls, params: DetectorParams) -> "DetectorState":
        return cls(score_window=params.score_window, var_window=params.var_window)


@dataclass
class Detection:
    step: int
    fired: bool
    S: float
    theta: float
    C_delta: float
    P_over: float
    reason: List[str] = field(default_factory=list)
    device: Optional[int] = None

    def to_record(self) -> Dict:
        return {
            "device": self.device,
            "step": self.step,
            "fired": self.fired,
            "S": self.S,
            "theta": self.theta,
            "C_delta": self.C_delta,
            "P_over": self.P_over,
            "reason": list(self.reason),
        }


def llr(p_hat: float) -> float:
    """log(p / (1 - p)) after clamping p into [1e-12, 1 - 1e-12]"""
    p = min(max(float(p_hat), P_CLAMP), 1.0 - P_CLAMP)
    return math.log(p / (1.0 - p))


def accumulate_score(state: DetectorState, lambda_t: float) -> float:
    """Windowed sum of the last T ratios, or the running sum when T = 0"""
    if state.score_window == 0:
        state.cumulative += lambda_t
        return state.cumulative
    state.llr_buffer.append(lambda_t)
    return sum(state.llr_buffer)


def adaptive_threshold(state: DetectorState, params: DetectorParams) -> float:
    """theta0 + gamma * population std of the recent score history"""
    if len(state.score_history) < 2:
        return params.theta0
    return params.theta0 + params.gamma * math.sqrt(float(np.var(np.fromiter(state.score_history, float))))


def drift_consistency(
    delta_hat_t: float,
    delta_hat_prev: Optional[float],
    tau_t: float,
    tau_prev: Optional[float],
    dt: float,
) -> float:
    """|predicted drift increment - observed (tau increment - dt)|; 0 without history"""
    if delta_hat_prev is None or tau_prev is None:
        return 0.0
    return abs((delta_hat_t - delta_hat_prev) - (tau_t - tau_prev - dt))


def overflow_probability(w_o: Sequence[float], inputs: Sequence[float]) -> float:
    return float(expit(float(np.dot(np.asarray(w_o, dtype=np.float64), np.asarray(inputs, dtype=np.float64)))))


def decide_step(
    state: DetectorState,
    p_hat: float,
    delta_hat: float,
    tau: float,
    params: DetectorParams,
    w_o: Sequence[float],
    proximity: Optional[float] = None,
    step: Optional[int] = None,
) -> Detection:
    """One detector update.

    proximity overrides the overflow-proximity flag; by default it is derived
    from tau itself.
    """
    lam = llr(p_hat)
    score = accumulate_score(state, lam)
    state.score_history.append(score)
    theta = adaptive_threshold(state, params)

    c_delta = drift_consistency(delta_hat, state.prev_delta_hat, tau, state.prev_tau, params.dt)

    v = delta_hat - state.prev_delta_hat if state.prev_delta_hat is not None else 0.0
    a = v - state.prev_v if state.prev_v is not None else 0.0
    if proximity is None:
        proximity = 1.0 if tau >= T0 - params.overflow_margin else 0.0
    p_over = overflow_probability(w_o, (delta_hat, v, a, proximity))

    score_gate = score > theta
    drift_hit = c_delta > params.eps_delta
    overflow_hit = p_over > params.eps_o
    fired = score_gate and (drift_hit or overflow_hit)

    reason: List[str] = []
    if fired:
        reason.append(REASON_SCORE)
        if drift_hit:
            reason.append(REASON_DRIFT)
        if overflow_hit:
            reason.append(REASON_OVERFLOW)

    detection = Detection(
        step=state.step if step is None else step,
        fired=fired,
        S=score,
        theta=theta,
        C_delta=c_delta,
        P_over=p_over,
        reason=reason,
    )

    state.prev_v = v if state.prev_delta_hat is not None else None
    state.prev_delta_hat = delta_hat
    state.prev_tau = tau
    state.step += 1
    return detection


class OnlineDetector:
    """Detector for one device stream; drive it from a single caller"""

    def __init__(self, params: DetectorParams, w_o: Sequence[float], device: Optional[int] = None):
        self.params = params
        self.w_o = np.asarray(w_o, dtype=np.float64)
        self.device = device
        self.state = DetectorState.from_params(params)

    def step(
        self,
        p_hat: float,
        delta_hat: float,
        tau: float,
        proximity: Optional[float] = None,
        step: Optional[int] = None,
    ) -> Detection:
        detection = decide_step(self.state, p_hat, delta_hat, tau, self.params, self.w_o, proximity, step)
        detection.device = self.device
        return detection

    def reset(self) -> None:
        self.state = DetectorState.from_params(self.params)


@dataclass
class StreamResult:
    detections: List[Detection]
    first_detection: Optional[int]
    delay: Optional[int]

    @property
    def fired_steps(self) -> List[int]:
        return [d.step for d in self.detections if d.fired]


def run_stream(
    p_hat: Sequence[float],
    delta_hat: Sequence[float],
    tau: Sequence[float],
    params: DetectorParams,
    w_o: Sequence[float],
    onset: Optional[int] = None,
    proximity: Optional[Sequence[float]] = None,
    first_step: int = 0,
    device: Optional[int] = None,
) -> StreamResult:
    """Replay a device's per-step outputs through a fresh detector"""
    n = len(p_hat)
    if n == 0:
        raise ValidationError("stream is empty")
    if len(delta_hat) != n or len(tau) != n or (proximity is not None and len(proximity) != n):
        raise ValidationError("stream columns differ in length")

    detector = OnlineDetector(params, w_o, device)
    detections = [
        detector.step(
            float(p_hat[i]),
            float(delta_hat[i]),
            float(tau[i]),
            None if proximity is None else float(proximity[i]),
            step=first_step + i,
        )
        for i in range(n)
    ]
    first = next(
        (d.step for d in detections if d.fired and (onset is None or d.step >= onset)),
        None,
    )
    delay = first - onset if first is not None and onset is not None else None
    return StreamResult(detections=detections, first_detection=first, delay=delay)


def write_detection_log(path: Path, detections: Iterable[Detection]) -> int:
    """One JSON object per line; returns the number of records"""
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for detection in detections:
            handle.write(json.dumps(detection.to_record()) + "\n")
            count += 1
    return count


def read_detection_log(path: Path) -> List[Detection]:
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError("detection log not found", path=str(path))
    detections = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                detections.append(
                    Detection(
                        step=int(record["step"]),
                        fired=bool(record["fired"]),
                        S=float(record["S"]),
                        theta=float(record["theta"]),
                        C_delta=float(record["C_delta"]),
                        P_over=float(record["P_over"]),
                        reason=list(record["reason"]),
                        device=record.get("device"),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError("malformed detection record", line=line_no, path=str(path)) from e
    return detections


@dataclass
class DeviceDetections:
    device: int
    onset: Optional[int]
    scenario: str
    result: StreamResult
    labels: np.ndarray  # per-step labels aligned with result.detections


@dataclass
class DetectReport:
    devices: List[DeviceDetections]

    def all_detections(self) -> List[Detection]:
        return [d for dev in self.devices for d in dev.result.detections]

    def summary(self) -> Dict[str, Dict]:
        return {
            str(dev.device): {
                "scenario": dev.scenario,
                "onset": dev.onset,
                "first_detection": dev.result.first_detection,
                "delay": dev.result.delay,
                "fired_steps": len(dev.result.fired_steps),
            }
            for dev in self.devices
        }


def detect_dataset(checkpoint: Checkpoint, dataset: Dataset, params: DetectorParams, split: str = "test") -> DetectReport:
    """Offline replay of every device in a split through the trained model"""
    model = checkpoint.model
    tensors = split_tensors(
        dataset.split_traces(split), dataset.split_graph(split), checkpoint.normalization, model.hyper
    )
    outputs = predict_stream(model, tensors, checkpoint.window)
    w_o = model.w_o.detach().numpy()

    devices = []
    for k, device_id in enumerate(outputs.device_ids):
        scenario = dataset.manifest.scenarios[device_id]
        onset = scenario.onset if scenario.perturbed else None
        result = run_stream(
            outputs.p_hat[k],
            outputs.delta_hat[k],
            outputs.tau[k],
            params,
            w_o,
            onset=onset,
            proximity=outputs.proximity[k],
            first_step=outputs.first_step,
            device=device_id,
        )
        devices.append(
            DeviceDetections(
                device=device_id,
                onset=onset,
                scenario=scenario.kind.value,
                result=result,
                labels=outputs.labels[k],
            )
        )
        logger.info(
            "device_replayed",
            device=device_id,
            scenario=scenario.kind.value,
            first_detection=result.first_detection,
            fired=len(result.fired_steps),
        )
    return DetectReport(devices=devices)


