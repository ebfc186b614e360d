"""
Software testbed: sensor nodes stream binary telemetry with 32-bit signed
timestamps to an inference node that runs the model and detector online.

Two transports are available. The in-process channel is an asyncio.Queue
and is the deterministic default; the socket transport frames each message
with a 4-byte length prefix over loopback TCP. Both deliver the same bytes,
and the inference node processes steps in lockstep across devices, so the
detection decisions do not depend on the transport.
"""

import asyncio
import json
import math
import struct
import time
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Deque, Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
import structlog
import torch
from pydantic import BaseModel, ConfigDict, Field

from clockdyn import T0, ClockParams, ClockSimulator, TimeConstants, device_rng, wrap32
from datagen import (
    DEFAULT_START_TIME,
    PHYSICAL_FEATURES,
    DeviceGraph,
    PhysicalConfig,
    ScenarioSpec,
    Topology,
    build_graph,
    model_inputs,
    scenario_controls,
    scenario_start_time,
    synth_physical,
)
from detector import Detection, DetectorParams, OnlineDetector
from errors import DatasetFormatError, DecodeErrorCode, TransportError, ValidationError, WireDecodeError
from monitoring import HarnessMetrics, set_harness_metrics
from stgat import DTYPE, Checkpoint

if TYPE_CHECKING:
    from config import SimulationConfig

logger = structlog.get_logger(__name__)

MAGIC = b"TG"
WIRE_VERSION = 1
HEADER = struct.Struct(">2sBHIiHB")
CRC = struct.Struct(">I")
LENGTH_PREFIX = struct.Struct(">I")
PREAMBLE = struct.Struct(">H")
MAX_FEATURES = 255
MAX_FRAME = HEADER.size + 8 * MAX_FEATURES + CRC.size


# Wire codec


@dataclass(frozen=True)
class WireMessage:
    device_id: int
    seq: int
    timestamp_s: int
    timestamp_frac_ms: int
    features: Tuple[float, ...] = ()

    @property
    def feature_count(self) -> int:
        return len(self.features)

    @property
    def reported_time(self) -> float:
        """Raw wire time in seconds, wraparound included"""
        return self.timestamp_s + self.timestamp_frac_ms / 1000.0


def message_length(feature_count: int) -> int:
    return HEADER.size + 8 * feature_count + CRC.size


def encode_message(msg: WireMessage) -> bytes:
    if not 0 <= msg.device_id <= 0xFFFF:
        raise ValidationError("device_id out of range", device_id=msg.device_id)
    if not 0 <= msg.seq <= 0xFFFFFFFF:
        raise ValidationError("seq out of range", seq=msg.seq)
    if not -T0 <= msg.timestamp_s < T0:
        raise ValidationError("timestamp_s does not fit a signed 32-bit field", timestamp_s=msg.timestamp_s)
    if not 0 <= msg.timestamp_frac_ms <= 999:
        raise ValidationError("timestamp_frac_ms must be in [0, 999]", frac=msg.timestamp_frac_ms)
    if msg.feature_count > MAX_FEATURES:
        raise ValidationError("too many features", count=msg.feature_count)

    body = HEADER.pack(
        MAGIC,
        WIRE_VERSION,
        msg.device_id,
        msg.seq,
        msg.timestamp_s,
        msg.timestamp_frac_ms,
        msg.feature_count,
    ) + struct.pack(f">{msg.feature_count}d", *msg.features)
    return body + CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def decode_message(data: bytes) -> WireMessage:
    """Parse and validate one message; each failure carries its own code"""
    if len(data) < HEADER.size + CRC.size:
        raise WireDecodeError(DecodeErrorCode.BAD_LENGTH, f"message too short ({len(data)} bytes)")
    magic, version, device_id, seq, ts, frac, count = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireDecodeError(DecodeErrorCode.BAD_MAGIC, f"bad magic {magic!r}")
    if version != WIRE_VERSION:
        raise WireDecodeError(DecodeErrorCode.BAD_VERSION, f"unsupported version {version}")
    if len(data) != message_length(count):
        raise WireDecodeError(
            DecodeErrorCode.BAD_LENGTH, f"expected {message_length(count)} bytes, got {len(data)}"
        )
    body = data[: -CRC.size]
    (crc,) = CRC.unpack_from(data, len(body))
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise WireDecodeError(DecodeErrorCode.BAD_CRC, "crc mismatch")
    if frac > 999:
        raise WireDecodeError(DecodeErrorCode.BAD_FIELD, f"timestamp_frac_ms {frac} > 999")
    features = struct.unpack_from(f">{count}d", data, HEADER.size)
    return WireMessage(device_id=device_id, seq=seq, timestamp_s=ts, timestamp_frac_ms=frac, features=features)


def split_reported_time(tau: float) -> Tuple[int, int]:
    """Internal reported time -> (wrapped 32-bit seconds, milliseconds)"""
    whole = math.floor(tau)
    frac_ms = min(int((tau - whole) * 1000.0), 999)
    return wrap32(whole), frac_ms


# Node configuration


class TransportMode(str, Enum):
    IN_PROCESS = "in_process"
    SOCKET = "socket"


class NodeConfig(BaseModel):
    """One simulated sensor: clock, timing scenario and feature source"""

    model_config = ConfigDict(frozen=True, extra="forbid")

    device_id: int = Field(ge=0, le=0xFFFF)
    clock: ClockParams = Field(default_factory=ClockParams)
    scenario: ScenarioSpec = Field(default_factory=ScenarioSpec)
    emit_interval_ms: float = Field(default=1000.0, gt=0)
    physical: PhysicalConfig = Field(default_factory=PhysicalConfig)
    physical_seed: int = Field(default=0, ge=0)
    seed: int = Field(default=0, ge=0, description="Clock noise seed")
    start_time: float = DEFAULT_START_TIME
    replay: Optional[Path] = Field(default=None, description="CSV of physical features replayed instead of synthesized")

    @property
    def dt(self) -> float:
        return self.emit_interval_ms / 1000.0


def load_replay_features(path: Path, n_features: int, ticks: int) -> np.ndarray:
    columns = PHYSICAL_FEATURES[:n_features]
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError("replay file not found", path=str(path))
    frame = pd.read_csv(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DatasetFormatError("replay file missing column", column=missing[0], path=str(path))
    if len(frame) < ticks:
        raise DatasetFormatError("replay file shorter than the run", rows=len(frame), ticks=ticks)
    values = frame[columns].to_numpy(dtype=np.float64)[:ticks]
    if not np.isfinite(values).all():
        raise DatasetFormatError("replay file has missing values", path=str(path))
    return values


def node_features(config: NodeConfig, ticks: int) -> np.ndarray:
    """Physical payloads for a whole run; independent of the clock scenario"""
    if config.replay is not None:
        return load_replay_features(config.replay, config.physical.n_features, ticks)
    return synth_physical(config.physical, ticks, config.physical_seed)


# Transports


@dataclass
class Envelope:
    device_id: int
    frame: Optional[bytes]  # None marks the end of the device's stream
    arrival: float = 0.0


class QueueSink:
    """In-process channel into the inference node's inbox"""

    def __init__(self, inbox: "asyncio.Queue[Envelope]", device_id: int):
        self.inbox = inbox
        self.device_id = device_id

    async def send(self, frame: bytes) -> None:
        await self.inbox.put(Envelope(self.device_id, frame, time.perf_counter()))

    async def close(self) -> None:
        await self.inbox.put(Envelope(self.device_id, None, time.perf_counter()))


class StreamSink:
    """Length-delimited frames over TCP, preceded by a device-id preamble"""

    def __init__(self, host: str, port: int, device_id: int):
        self.host = host
        self.port = port
        self.device_id = device_id
        self.writer: Optional[asyncio.StreamWriter] = None

    async def open(self) -> None:
        _, self.writer = await asyncio.open_connection(self.host, self.port)
        self.writer.write(PREAMBLE.pack(self.device_id))
        await self.writer.drain()

    async def send(self, frame: bytes) -> None:
        if self.writer is None:
            await self.open()
        try:
            self.writer.write(LENGTH_PREFIX.pack(len(frame)) + frame)
            await self.writer.drain()
        except (ConnectionError, OSError):
            self.writer = None
            raise

    async def close(self) -> None:
        if self.writer is None:
            return
        try:
            # zero-length frame: clean end of stream
            self.writer.write(LENGTH_PREFIX.pack(0))
            await self.writer.drain()
            self.writer.close()
            await self.writer.wait_closed()
        except (ConnectionError, OSError) as e:
            logger.warning("sink_close_failed", device=self.device_id, error=str(e))
        finally:
            self.writer = None


async def serve_inbox(inbox: "asyncio.Queue[Envelope]", host: str, port: int) -> asyncio.AbstractServer:
    """TCP listener feeding every connection's frames into one inbox"""

    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        device_id: Optional[int] = None
        try:
            (device_id,) = PREAMBLE.unpack(await reader.readexactly(PREAMBLE.size))
            while True:
                (length,) = LENGTH_PREFIX.unpack(await reader.readexactly(LENGTH_PREFIX.size))
                if length == 0:
                    break
                if length > MAX_FRAME:
                    # unframeable; report it once and drop the connection
                    await inbox.put(Envelope(device_id, b"", time.perf_counter()))
                    break
                frame = await reader.readexactly(length)
                await inbox.put(Envelope(device_id, frame, time.perf_counter()))
        except asyncio.IncompleteReadError:
            pass
        finally:
            if device_id is not None:
                await inbox.put(Envelope(device_id, None, time.perf_counter()))
            writer.close()

    try:
        return await asyncio.start_server(handle, host, port)
    except OSError as e:
        raise TransportError("cannot listen", host=host, port=port, error=str(e)) from e


async def send_with_retry(sink: Any, frame: bytes, device_id: int, max_retries: int = 3, backoff: float = 0.05) -> None:
    for attempt in range(max_retries + 1):
        try:
            await sink.send(frame)
            return
        except (ConnectionError, OSError) as e:
            if attempt == max_retries:
                raise TransportError("send failed", device=device_id, attempts=attempt + 1, error=str(e)) from e
            logger.warning("send_retry", device=device_id, attempt=attempt + 1, error=str(e))
            await asyncio.sleep(backoff * 2**attempt)


# Sensor node


async def sensor_node_run(
    config: NodeConfig,
    sink: Any,
    stop: Optional[asyncio.Event] = None,
    ticks: int = 60,
    real_time: bool = False,
    max_retries: int = 3,
) -> int:
    """Emit one packet per tick until ticks run out or stop is set.

    The clock-distortion path touches only the timestamp fields; payloads come
    from the physical source alone. Returns the number of packets sent. On a
    transport failure the sink is closed and TransportError is raised with the
    count sent so far.
    """
    dt = config.dt
    constants = TimeConstants(dt=dt)
    start = scenario_start_time(config.scenario, config.start_time, dt)
    clock = ClockSimulator(config.clock, device_rng(config.seed, config.device_id), start, constants)
    features = node_features(config, ticks)

    sent = 0
    try:
        for k in range(ticks):
            if stop is not None and stop.is_set():
                break
            step = clock.step(start + k * dt, **scenario_controls(config.scenario, k))
            timestamp_s, frac_ms = split_reported_time(step.tau)
            frame = encode_message(
                WireMessage(
                    device_id=config.device_id,
                    seq=k,
                    timestamp_s=timestamp_s,
                    timestamp_frac_ms=frac_ms,
                    features=tuple(float(v) for v in features[k]),
                )
            )
            try:
                await send_with_retry(sink, frame, config.device_id, max_retries)
            except TransportError as e:
                e.context["sent"] = sent
                logger.error("sensor_transport_failed", device=config.device_id, sent=sent, error=str(e))
                raise
            sent += 1
            await asyncio.sleep(dt if real_time else 0)
    finally:
        await sink.close()
    logger.info("sensor_finished", device=config.device_id, sent=sent)
    return sent


# Inference node


class TimestampUnwrapper:
    """Per-device epoch counter over raw wire time.

    A backward jump larger than 2**31 seconds counts as one wrap and adds
    2**32 to every later value.
    """

    def __init__(self):
        self.epochs = 0
        self.previous: Optional[float] = None

    def update(self, raw: float) -> float:
        if self.previous is not None and self.previous - raw > T0:
            self.epochs += 1
        self.previous = raw
        return raw + self.epochs * 2 * T0


@dataclass
class ReconstructedStep:
    seq: int
    x: np.ndarray
    d: np.ndarray  # [dt, delta_hat, eta_hat, overflow_hat]
    tau_raw: float
    tau_unwrapped: float


class StepReconstructor:
    """Drift inputs estimated from received timestamps alone.

    The distortion estimate is the unwrapped time minus the nominal schedule
    anchored at the first packet. Estimates at or above T0/2 mean the
    overflow flag is set and T0 is removed. Increments above step_threshold
    go to the offset, the rest to the drift.
    """

    def __init__(self, dt: float, step_threshold: float):
        self.dt = dt
        self.step_threshold = step_threshold
        self.unwrapper = TimestampUnwrapper()
        self.origin: Optional[float] = None
        self.prev_psi: Optional[float] = None
        self.delta = 0.0
        self.eta = 0.0

    def update(self, msg: WireMessage) -> ReconstructedStep:
        raw = msg.reported_time
        unwrapped = self.unwrapper.update(raw)
        if self.origin is None:
            self.origin = unwrapped - msg.seq * self.dt
        psi = unwrapped - (self.origin + msg.seq * self.dt)
        overflow = 1 if psi >= T0 / 2 else 0
        psi -= overflow * T0

        if self.prev_psi is not None:
            increment = psi - self.prev_psi
            if abs(increment) > self.step_threshold:
                self.eta += increment
            else:
                self.delta += increment
        self.prev_psi = psi
        return ReconstructedStep(
            seq=msg.seq,
            x=np.asarray(msg.features, dtype=np.float64),
            d=np.array([self.dt, self.delta, self.eta, float(overflow)]),
            tau_raw=raw,
            tau_unwrapped=unwrapped,
        )


class StepAssembler:
    """Lockstep demultiplexer.

    Step k is released once every device has delivered some seq >= k or has
    ended. Devices that ended before k drop out; a device that skipped k
    (lost packet) appears with None.
    """

    def __init__(self, devices: Sequence[int]):
        self.pending: Dict[int, Dict[int, Any]] = {d: {} for d in devices}
        self.high: Dict[int, int] = {d: -1 for d in devices}
        self.ended: Set[int] = set()
        self.next_step = 0

    def push(self, device: int, seq: int, item: Any) -> bool:
        """False for late or duplicate packets, which are ignored"""
        if device not in self.pending:
            raise ValidationError("unknown device", device=device)
        if device in self.ended or seq < self.next_step or seq in self.pending[device]:
            return False
        self.pending[device][seq] = item
        self.high[device] = max(self.high[device], seq)
        return True

    def end(self, device: int) -> None:
        self.ended.add(device)

    def live(self) -> List[int]:
        return [d for d in self.pending if d not in self.ended or self.high[d] >= self.next_step]

    def _ready(self, k: int) -> bool:
        return all(d in self.ended or self.high[d] >= k for d in self.pending)

    def drain(self) -> Iterator[Tuple[int, Dict[int, Any]]]:
        while self._ready(self.next_step):
            k = self.next_step
            present = [d for d in self.pending if self.high[d] >= k]
            if not present:
                return
            self.next_step += 1
            yield k, {d: self.pending[d].pop(k, None) for d in present}

    @property
    def finished(self) -> bool:
        return len(self.ended) == len(self.pending) and all(h < self.next_step for h in self.high.values())


class DevicePipeline:
    """Reconstruction, sliding window and detector for one device"""

    def __init__(self, device_id: int, window: int, dt: float, step_threshold: float, params: DetectorParams, w_o: np.ndarray):
        self.device_id = device_id
        self.reconstructor = StepReconstructor(dt, step_threshold)
        self.history: Deque[ReconstructedStep] = deque(maxlen=window)
        self.detector = OnlineDetector(params, w_o, device_id)
        self.overflow_margin = params.overflow_margin

    def push(self, msg: WireMessage) -> ReconstructedStep:
        step = self.reconstructor.update(msg)
        self.history.append(step)
        return step

    def fill_gap(self) -> None:
        if self.history:
            self.history.append(self.history[-1])

    @property
    def filled(self) -> bool:
        return len(self.history) == self.history.maxlen

    def window_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.stack([s.x for s in self.history]), np.stack([s.d for s in self.history])

    def proximity(self) -> float:
        return 1.0 if self.history[-1].tau_unwrapped >= T0 - self.overflow_margin else 0.0


@dataclass
class SimulationReport:
    packets: Dict[int, int] = field(default_factory=dict)
    sent: Dict[int, int] = field(default_factory=dict)
    decode_errors: Dict[str, int] = field(default_factory=dict)
    detections: List[Detection] = field(default_factory=list)
    latency: Dict[str, float] = field(default_factory=dict)
    delays: Dict[int, Optional[int]] = field(default_factory=dict)
    sensor_errors: Dict[int, str] = field(default_factory=dict)
    received: List[WireMessage] = field(default_factory=list)  # accepted packets, arrival order

    @property
    def fired(self) -> List[Detection]:
        return [d for d in self.detections if d.fired]

    def to_dict(self) -> Dict[str, Any]:
        """Deterministic part of the run; wall-clock latency is kept out"""
        return {
            "packets": {str(k): v for k, v in sorted(self.packets.items())},
            "sent": {str(k): v for k, v in sorted(self.sent.items())},
            "decode_errors": dict(sorted(self.decode_errors.items())),
            "decisions": len(self.detections),
            "detections": [d.to_record() for d in self.fired],
            "delays": {str(k): v for k, v in sorted(self.delays.items())},
            "sensor_errors": {str(k): v for k, v in sorted(self.sensor_errors.items())},
        }


def write_report(report: SimulationReport, path: Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def write_latency(report: SimulationReport, path: Path) -> None:
    Path(path).write_text(json.dumps(report.latency, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# Packet logs


def write_packet_log(path: Path, messages: Iterable[WireMessage]) -> int:
    """Decoded packets as JSON lines; returns the number of records"""
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for msg in messages:
            handle.write(json.dumps(asdict(msg)) + "\n")
            count += 1
    return count


def read_packet_log(path: Path) -> List[WireMessage]:
    path = Path(path)
    if not path.exists():
        raise DatasetFormatError("packet log not found", path=str(path))
    messages = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                messages.append(
                    WireMessage(
                        device_id=int(record["device_id"]),
                        seq=int(record["seq"]),
                        timestamp_s=int(record["timestamp_s"]),
                        timestamp_frac_ms=int(record["timestamp_frac_ms"]),
                        features=tuple(float(v) for v in record["features"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DatasetFormatError("malformed packet record", line=line_no, path=str(path)) from e
    if not messages:
        raise DatasetFormatError("packet log is empty", path=str(path))
    return messages


class InferenceNode:
    """Online STGAT + detector over every device's reconstructed stream"""

    def __init__(
        self,
        checkpoint: Checkpoint,
        params: DetectorParams,
        devices: Sequence[int],
        dt: float,
        graph: Optional[DeviceGraph] = None,
        step_threshold: float = 0.05,
        metrics: Optional[HarnessMetrics] = None,
        onsets: Optional[Dict[int, int]] = None,
    ):
        if not devices:
            raise ValidationError("inference node needs at least one device")
        self.model = checkpoint.model
        self.model.eval()
        self.normalization = checkpoint.normalization
        self.window = checkpoint.window
        self.devices = list(devices)
        self.index = {d: i for i, d in enumerate(self.devices)}
        self.graph = graph or build_graph(len(self.devices), Topology.RING)
        self.metrics = metrics
        self.onsets = onsets or {}
        if not math.isclose(checkpoint.dt, dt):
            logger.warning("dt_mismatch", checkpoint_dt=checkpoint.dt, stream_dt=dt)

        w_o = self.model.w_o.detach().numpy()
        self.pipelines = {
            d: DevicePipeline(d, self.window, dt, step_threshold, params, w_o) for d in self.devices
        }
        self.assembler = StepAssembler(self.devices)
        self.report = SimulationReport(packets={d: 0 for d in self.devices})

    def receive(self, envelope: Envelope) -> List[Detection]:
        """Take one transport event and return the decisions it released"""
        if envelope.frame is None:
            self.assembler.end(envelope.device_id)
            return self._drain()

        try:
            msg = decode_message(envelope.frame)
            if msg.device_id != envelope.device_id or msg.device_id not in self.pipelines:
                raise WireDecodeError(DecodeErrorCode.BAD_FIELD, f"unexpected device id {msg.device_id}")
            if msg.feature_count != self.model.n_features:
                raise WireDecodeError(DecodeErrorCode.BAD_FIELD, f"expected {self.model.n_features} features")
        except WireDecodeError as e:
            code = e.code.value
            self.report.decode_errors[code] = self.report.decode_errors.get(code, 0) + 1
            if self.metrics is not None:
                self.metrics.record_decode_error(code)
            logger.debug("decode_error", device=envelope.device_id, code=code)
            return []

        if self.assembler.push(msg.device_id, msg.seq, (msg, envelope.arrival)):
            self.report.packets[msg.device_id] += 1
            self.report.received.append(msg)
            if self.metrics is not None:
                self.metrics.record_packet(msg.device_id)
        return self._drain()

    def _drain(self) -> List[Detection]:
        released: List[Detection] = []
        for k, items in self.assembler.drain():
            released.extend(self._process_step(k, items))
        if self.metrics is not None:
            self.metrics.set_active_devices(len(self.assembler.live()))
        return released

    def _process_step(self, k: int, items: Dict[int, Any]) -> List[Detection]:
        ready: List[Tuple[int, float]] = []
        for device, item in items.items():
            pipeline = self.pipelines[device]
            if item is None:
                pipeline.fill_gap()
                continue
            msg, arrival = item
            pipeline.push(msg)
            if pipeline.filled:
                ready.append((device, arrival))
        if not ready:
            return []

        windows = [self.pipelines[d].window_arrays() for d, _ in ready]
        x_n, d_n = model_inputs(
            np.stack([w[0] for w in windows]), np.stack([w[1] for w in windows]), self.normalization
        )
        adjacency = torch.as_tensor(self.graph.subgraph([self.index[d] for d, _ in ready]).adjacency())
        with torch.no_grad():
            out = self.model(torch.as_tensor(x_n, dtype=DTYPE), torch.as_tensor(d_n, dtype=DTYPE), adjacency)
        p_hat = out.p_hat[:, -1].numpy()
        delta_hat = out.delta_hat[:, -1].numpy()

        decisions = []
        for i, (device, arrival) in enumerate(ready):
            pipeline = self.pipelines[device]
            detection = pipeline.detector.step(
                float(p_hat[i]),
                float(delta_hat[i]),
                pipeline.history[-1].tau_raw,
                proximity=pipeline.proximity(),
                step=k,
            )
            decisions.append(detection)
            if self.metrics is not None:
                self.metrics.record_latency(max(time.perf_counter() - arrival, 0.0))
            if detection.fired:
                if self.metrics is not None:
                    self.metrics.record_detection(device)
                if device not in self.report.delays and device in self.onsets and k >= self.onsets[device]:
                    self.report.delays[device] = k - self.onsets[device]
                    logger.info("detection_fired", device=device, step=k, reason=detection.reason)
        self.report.detections.extend(decisions)
        return decisions

    def finalize(self) -> SimulationReport:
        for device in self.onsets:
            self.report.delays.setdefault(device, None)
        if self.metrics is not None:
            self.report.latency = self.metrics.latency_summary()
        return self.report


async def inference_node_run(
    inbox: "asyncio.Queue[Envelope]",
    node: InferenceNode,
    stop: Optional[asyncio.Event] = None,
) -> SimulationReport:
    """Consume the inbox until every device stream has ended (or stop is set)"""
    while not node.assembler.finished:
        if stop is not None and stop.is_set() and inbox.empty():
            break
        envelope = await inbox.get()
        node.receive(envelope)
    return node.finalize()


def replay_packet_log(
    messages: Sequence[WireMessage],
    checkpoint: Checkpoint,
    params: DetectorParams,
    dt: float,
    topology: Topology = Topology.RING,
    step_threshold: float = 0.05,
    onsets: Optional[Dict[int, int]] = None,
) -> SimulationReport:
    """Offline inference over a recorded packet stream.

    Devices take graph positions in ascending id order, as in a simulation
    whose nodes are listed by id; every stream ends after its last packet.
    """
    devices = sorted({msg.device_id for msg in messages})
    node = InferenceNode(
        checkpoint,
        params,
        devices,
        dt,
        graph=build_graph(len(devices), topology),
        step_threshold=step_threshold,
        onsets=onsets,
    )
    for msg in messages:
        node.receive(Envelope(msg.device_id, encode_message(msg)))
    for device in devices:
        node.receive(Envelope(device, None))
    report = node.finalize()
    logger.info("packet_log_replayed", packets=len(messages), devices=devices, detections=len(report.fired))
    return report


# Orchestration


async def simulate(
    config: "SimulationConfig",
    checkpoint: Checkpoint,
    metrics: Optional[HarnessMetrics] = None,
) -> SimulationReport:
    """Run every sensor node and the inference node until all streams end"""
    if not config.nodes:
        raise ValidationError("simulation needs at least one node")
    dts = {node.dt for node in config.nodes}
    if len(dts) != 1:
        raise ValidationError("all nodes must share one emit interval", intervals=sorted(dts))
    dt = dts.pop()

    metrics = metrics or HarnessMetrics()
    set_harness_metrics(metrics)
    devices = [node.device_id for node in config.nodes]
    onsets = {n.device_id: n.scenario.onset for n in config.nodes if n.scenario.perturbed}
    node = InferenceNode(
        checkpoint,
        config.detector,
        devices,
        dt,
        graph=build_graph(len(devices), config.topology),
        step_threshold=config.step_threshold,
        metrics=metrics,
        onsets=onsets,
    )
    inbox: "asyncio.Queue[Envelope]" = asyncio.Queue()
    stop = asyncio.Event()

    server = None
    host, port = config.host, config.port
    if config.mode == TransportMode.SOCKET:
        server = await serve_inbox(inbox, host, port)
        port = server.sockets[0].getsockname()[1]
        logger.info("inference_listening", host=host, port=port)

    async def run_sensor(node_config: NodeConfig) -> None:
        device = node_config.device_id
        ticks = min(config.ticks, config.kill_after.get(device, config.ticks))
        sink = QueueSink(inbox, device) if server is None else StreamSink(host, port, device)
        try:
            node.report.sent[device] = await sensor_node_run(
                node_config, sink, stop, ticks=ticks, real_time=config.real_time
            )
        except TransportError as e:
            node.report.sent[device] = int(e.context.get("sent", 0))
            node.report.sensor_errors[device] = str(e)
        if node.report.sent[device] == 0 or device in node.report.sensor_errors:
            # the listener may never have seen this device
            await inbox.put(Envelope(device, None, time.perf_counter()))

    logger.info("simulation_started", devices=devices, ticks=config.ticks, mode=config.mode.value)
    inference = asyncio.create_task(inference_node_run(inbox, node, stop))
    try:
        await asyncio.gather(*(run_sensor(n) for n in config.nodes))
        report = await inference
    finally:
        if not inference.done():
            inference.cancel()
        if server is not None:
            server.close()
            await server.wait_closed()
        set_harness_metrics(None)

    logger.info(
        "simulation_finished",
        packets=sum(report.packets.values()),
        detections=len(report.fired),
        decode_errors=sum(report.decode_errors.values()),
    )
    return report


def run_simulation(
    config: "SimulationConfig",
    checkpoint: Checkpoint,
    metrics: Optional[HarnessMetrics] = None,
) -> SimulationReport:
    return asyncio.run(simulate(config, checkpoint, metrics))
