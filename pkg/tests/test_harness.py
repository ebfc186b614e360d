import asyncio
import json
import math
import zlib

import pytest

from clockdyn import T0, ClockParams, ClockSimulator, TimeConstants, device_rng, wrap32
from config import SimulationConfig
from datagen import ScenarioKind, ScenarioSpec
from detector import DetectorParams
from errors import DatasetFormatError, DecodeErrorCode, TransportError, ValidationError, WireDecodeError
from harness import (
    CRC,
    HEADER,
    MAGIC,
    Envelope,
    InferenceNode,
    NodeConfig,
    QueueSink,
    StepAssembler,
    StepReconstructor,
    TimestampUnwrapper,
    TransportMode,
    WireMessage,
    read_packet_log,
    replay_packet_log,
    decode_message,
    encode_message,
    message_length,
    send_with_retry,
    sensor_node_run,
    simulate,
    split_reported_time,
    write_latency,
    write_packet_log,
    write_report,
)
from monitoring import get_harness_metrics

OVERFLOW_ONSET = 60


def _message(**overrides) -> WireMessage:
    fields = dict(device_id=7, seq=3, timestamp_s=1_700_000_000, timestamp_frac_ms=250, features=(1.0, -2.5, 3.25))
    fields.update(overrides)
    return WireMessage(**fields)


def _sim_config(overflow: bool = True, **overrides) -> SimulationConfig:
    first = NodeConfig(device_id=1, physical_seed=11, seed=1)
    if overflow:
        first = NodeConfig(
            device_id=1,
            physical_seed=11,
            seed=1,
            scenario=ScenarioSpec(kind=ScenarioKind.EPOCH_OVERFLOW, onset=OVERFLOW_ONSET),
        )
    fields = dict(nodes=[first, NodeConfig(device_id=2, physical_seed=12, seed=2)], ticks=120)
    fields.update(overrides)
    return SimulationConfig(**fields)


async def _collect(inbox: asyncio.Queue):
    envelopes = []
    while not inbox.empty():
        envelopes.append(await inbox.get())
    return envelopes


# wire codec


def test_max_timestamp_is_big_endian_at_offset_nine():
    data = encode_message(_message(timestamp_s=2147483647))
    assert data[:2] == MAGIC
    assert data[9:13] == bytes.fromhex("7FFFFFFF")
    assert len(data) == message_length(3)
    assert decode_message(data).timestamp_s == 2147483647


def test_decode_restores_message():
    msg = _message(timestamp_s=-5, features=())
    decoded = decode_message(encode_message(msg))
    assert decoded == msg
    assert decoded.reported_time == pytest.approx(-5 + 0.25)


@pytest.mark.parametrize(
    "corrupt,code",
    [
        (lambda b: b[:-1] + bytes([b[-1] ^ 0xFF]), DecodeErrorCode.BAD_CRC),
        (lambda b: b"XX" + b[2:], DecodeErrorCode.BAD_MAGIC),
        (lambda b: b[:2] + bytes([2]) + b[3:], DecodeErrorCode.BAD_VERSION),
        (lambda b: b[:-1], DecodeErrorCode.BAD_LENGTH),
        (lambda b: b[:5], DecodeErrorCode.BAD_LENGTH),
    ],
)
def test_decode_error_codes(corrupt, code):
    with pytest.raises(WireDecodeError) as excinfo:
        decode_message(corrupt(encode_message(_message())))
    assert excinfo.value.code == code


def test_decode_rejects_out_of_range_fraction():
    body = HEADER.pack(MAGIC, 1, 7, 0, 0, 1000, 0)
    with pytest.raises(WireDecodeError) as excinfo:
        decode_message(body + CRC.pack(zlib.crc32(body)))
    assert excinfo.value.code == DecodeErrorCode.BAD_FIELD


def test_encode_validates_fields():
    with pytest.raises(ValidationError):
        encode_message(_message(timestamp_frac_ms=1000))
    with pytest.raises(ValidationError):
        encode_message(_message(timestamp_s=T0))
    with pytest.raises(ValidationError):
        encode_message(_message(device_id=70000))


def test_split_reported_time():
    assert split_reported_time(T0 + 0.5) == (-T0, 500)
    assert split_reported_time(12.9999) == (12, 999)
    assert split_reported_time(-0.25) == (-1, 750)


# inference-side reconstruction


def test_unwrapper_counts_backward_jumps():
    unwrapper = TimestampUnwrapper()
    values = [unwrapper.update(raw) for raw in (T0 - 1.0, -T0 + 1.0, -T0 + 2.0)]
    assert values == [T0 - 1.0, T0 + 1.0, T0 + 2.0]
    # small backward steps are not wraps
    assert unwrapper.update(-T0) == T0


def _wire(seq: int, tau: float) -> WireMessage:
    seconds, frac = split_reported_time(tau)
    return WireMessage(device_id=1, seq=seq, timestamp_s=seconds, timestamp_frac_ms=frac, features=(0.0,))


def test_reconstructor_detects_overflow_flag():
    rec = StepReconstructor(dt=1.0, step_threshold=0.05)
    taus = [T0 - 2.0, T0 - 1.0, float(T0), float(2 * T0 + 1)]
    steps = [rec.update(_wire(k, tau)) for k, tau in enumerate(taus)]
    assert [s.d[3] for s in steps] == [0.0, 0.0, 0.0, 1.0]
    assert steps[2].tau_raw == -T0
    assert steps[2].tau_unwrapped == T0
    assert steps[3].d[1] == pytest.approx(0.0)
    assert steps[3].d[2] == pytest.approx(0.0)


def test_reconstructor_splits_drift_and_offset():
    rec = StepReconstructor(dt=1.0, step_threshold=0.05)
    steps = [rec.update(_wire(k, tau)) for k, tau in enumerate((100.0, 101.01, 102.51))]
    assert steps[1].d[1] == pytest.approx(0.01)
    assert steps[2].d[1] == pytest.approx(0.01)
    assert steps[2].d[2] == pytest.approx(0.5)


def test_assembler_lockstep_with_gaps_and_ends():
    assembler = StepAssembler([1, 2])
    assert assembler.push(1, 0, "a")
    assert list(assembler.drain()) == []
    assembler.push(2, 0, "b")
    assert list(assembler.drain()) == [(0, {1: "a", 2: "b"})]

    # device 1 lost seq 1
    assembler.push(1, 2, "c")
    assembler.push(2, 1, "d")
    assert list(assembler.drain()) == [(1, {1: None, 2: "d"})]
    assert not assembler.push(2, 0, "late")
    assert not assembler.push(1, 2, "duplicate")

    assembler.end(2)
    assert list(assembler.drain()) == [(2, {1: "c"})]
    assert not assembler.finished
    assembler.end(1)
    assert list(assembler.drain()) == []
    assert assembler.finished
    assert not assembler.push(1, 5, "after end")

    with pytest.raises(ValidationError):
        assembler.push(9, 0, "x")


def test_inference_node_counts_decode_errors(handcrafted_checkpoint):
    node = InferenceNode(handcrafted_checkpoint, DetectorParams(), [1], dt=1.0)
    assert node.receive(Envelope(1, b"garbage")) == []
    good = encode_message(_message(device_id=1, seq=0, features=(1.0,) * 5))
    node.receive(Envelope(2, good))
    node.receive(Envelope(1, encode_message(_message(device_id=1, seq=0, features=(1.0,) * 4))))
    assert node.report.decode_errors == {"bad_length": 1, "bad_field": 2}
    assert node.report.packets == {1: 0}

    node.receive(Envelope(1, good))
    assert node.report.packets == {1: 1}


# sensor node


async def test_sensor_emits_one_packet_per_tick():
    inbox: asyncio.Queue = asyncio.Queue()
    sent = await sensor_node_run(NodeConfig(device_id=3), QueueSink(inbox, 3), ticks=100)
    assert sent == 100
    envelopes = await _collect(inbox)
    assert len(envelopes) == 101
    assert envelopes[-1].frame is None
    messages = [decode_message(e.frame) for e in envelopes[:-1]]
    assert [m.seq for m in messages] == list(range(100))
    assert all(m.device_id == 3 and m.feature_count == 5 for m in messages)


async def test_sensor_timestamps_follow_the_clock():
    config = NodeConfig(device_id=4, seed=8)
    inbox: asyncio.Queue = asyncio.Queue()
    await sensor_node_run(config, QueueSink(inbox, 4), ticks=30)
    messages = [decode_message(e.frame) for e in (await _collect(inbox))[:-1]]

    clock = ClockSimulator(ClockParams(), device_rng(8, 4), config.start_time, TimeConstants(dt=1.0))
    for k, msg in enumerate(messages):
        step = clock.step(config.start_time + k)
        assert msg.timestamp_s == wrap32(math.floor(step.tau))


async def test_overflow_sensor_wraps_to_negative_and_keeps_payload():
    overflow = NodeConfig(
        device_id=5,
        physical_seed=3,
        scenario=ScenarioSpec(kind=ScenarioKind.EPOCH_OVERFLOW, onset=50),
    )
    clean = NodeConfig(device_id=5, physical_seed=3)
    runs = []
    for config in (overflow, clean):
        inbox: asyncio.Queue = asyncio.Queue()
        await sensor_node_run(config, QueueSink(inbox, 5), ticks=100)
        runs.append([decode_message(e.frame) for e in (await _collect(inbox))[:-1]])

    wrapped, plain = runs
    assert wrapped[48].timestamp_s > 0
    assert wrapped[49].timestamp_s == -T0
    assert all(m.timestamp_s > 0 for m in plain)
    # distortion only touches the timestamp fields
    assert [m.features for m in wrapped] == [m.features for m in plain]


async def test_sensor_respects_stop_event():
    inbox: asyncio.Queue = asyncio.Queue()
    stop = asyncio.Event()
    stop.set()
    assert await sensor_node_run(NodeConfig(device_id=1), QueueSink(inbox, 1), stop, ticks=10) == 0
    envelopes = await _collect(inbox)
    assert len(envelopes) == 1 and envelopes[0].frame is None


class FlakySink:
    def __init__(self, failures: int):
        self.failures = failures
        self.frames = []
        self.closed = False

    async def send(self, frame: bytes) -> None:
        if self.failures > 0:
            self.failures -= 1
            raise ConnectionResetError("peer reset")
        self.frames.append(frame)

    async def close(self) -> None:
        self.closed = True


async def test_send_with_retry_recovers():
    sink = FlakySink(failures=2)
    await send_with_retry(sink, b"frame", 1, max_retries=3, backoff=0.0)
    assert sink.frames == [b"frame"]


async def test_sensor_gives_up_after_bounded_retries():
    sink = FlakySink(failures=100)
    with pytest.raises(TransportError) as excinfo:
        await sensor_node_run(NodeConfig(device_id=1), sink, ticks=5, max_retries=1)
    assert excinfo.value.context["sent"] == 0
    assert sink.closed


# end-to-end simulation


def _records(report):
    return [d.to_record() for d in report.detections]


async def test_clean_devices_raise_no_alarms(handcrafted_checkpoint):
    report = await simulate(_sim_config(overflow=False), handcrafted_checkpoint)
    assert report.packets == {1: 120, 2: 120}
    assert report.sent == {1: 120, 2: 120}
    assert report.fired == []
    assert report.delays == {}
    # one decision per device from the first full window on
    assert len(report.detections) == 2 * (120 - 19)
    assert report.latency["count"] == len(report.detections)
    assert report.latency["mean_ms"] >= 0.0
    assert get_harness_metrics() is None


async def test_forced_overflow_is_detected_on_that_device_only(handcrafted_checkpoint, tmp_path):
    report = await simulate(_sim_config(), handcrafted_checkpoint)
    fired_devices = {d.device for d in report.fired}
    assert fired_devices == {1}
    assert report.delays[1] is not None and report.delays[1] <= 5
    assert min(d.step for d in report.fired) >= OVERFLOW_ONSET

    path = tmp_path / "report.json"
    write_report(report, path)
    payload = json.loads(path.read_text(encoding="utf-8"))
    assert payload["decisions"] == len(report.detections)
    assert payload["delays"] == {"1": report.delays[1]}
    assert all(record["fired"] for record in payload["detections"])


async def test_killed_sensor_stops_early(handcrafted_checkpoint):
    report = await simulate(_sim_config(kill_after={2: 50}), handcrafted_checkpoint)
    assert report.packets == {1: 120, 2: 50}
    assert report.sent[2] == 50
    assert max(d.step for d in report.detections if d.device == 2) == 49
    # the surviving device is still served and still detected
    assert report.delays[1] is not None


async def test_in_process_runs_are_deterministic(handcrafted_checkpoint):
    first = await simulate(_sim_config(), handcrafted_checkpoint)
    second = await simulate(_sim_config(), handcrafted_checkpoint)
    assert _records(first) == _records(second)


async def test_socket_transport_matches_in_process(handcrafted_checkpoint):
    in_process = await simulate(_sim_config(), handcrafted_checkpoint)
    socket = await simulate(_sim_config(mode=TransportMode.SOCKET), handcrafted_checkpoint)
    assert socket.packets == in_process.packets
    assert socket.decode_errors == {}
    assert _records(socket) == _records(in_process)


async def test_report_json_is_byte_identical_across_runs(handcrafted_checkpoint, tmp_path):
    paths = []
    for name in ("first", "second"):
        report = await simulate(_sim_config(), handcrafted_checkpoint)
        path = tmp_path / f"{name}.json"
        write_report(report, path)
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert "latency" not in json.loads(paths[0].read_text(encoding="utf-8"))

    # wall-clock timings go to their own file
    write_latency(report, tmp_path / "latency.json")
    latency = json.loads((tmp_path / "latency.json").read_text(encoding="utf-8"))
    assert latency["count"] == len(report.detections)


async def test_packet_log_replay_matches_the_live_run(handcrafted_checkpoint, tmp_path):
    config = _sim_config()
    live = await simulate(config, handcrafted_checkpoint)
    path = tmp_path / "packets.jsonl"
    assert write_packet_log(path, live.received) == 240

    messages = read_packet_log(path)
    assert messages == live.received
    replayed = replay_packet_log(
        messages,
        handcrafted_checkpoint,
        config.detector,
        dt=1.0,
        topology=config.topology,
        step_threshold=config.step_threshold,
        onsets={1: OVERFLOW_ONSET},
    )
    assert replayed.packets == live.packets
    assert _records(replayed) == _records(live)
    assert replayed.delays == live.delays


def test_read_packet_log_errors(tmp_path):
    with pytest.raises(DatasetFormatError):
        read_packet_log(tmp_path / "missing.jsonl")
    empty = tmp_path / "empty.jsonl"
    empty.write_text("\n", encoding="utf-8")
    with pytest.raises(DatasetFormatError):
        read_packet_log(empty)
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"device_id": 1, "seq": 0, "timestamp_s": 5, "timestamp_frac_ms": 0, "features": []}\n{"device_id": 1}\n', encoding="utf-8")
    with pytest.raises(DatasetFormatError) as excinfo:
        read_packet_log(broken)
    assert excinfo.value.context["line"] == 2


def test_mixed_emit_intervals_are_rejected(handcrafted_checkpoint):
    config = _sim_config(
        nodes=[NodeConfig(device_id=1), NodeConfig(device_id=2, emit_interval_ms=500)],
    )
    with pytest.raises(ValidationError):
        asyncio.run(simulate(config, handcrafted_checkpoint))
