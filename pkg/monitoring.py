"""
Logging and metrics for clockwatch.
Structured logging via structlog; prometheus metrics for the testbed harness.
"""

import logging
import logging.handlers
import time
from collections import defaultdict, deque
from pathlib import Path
from typing import TYPE_CHECKING, Any, Deque, Dict, Optional

import numpy as np
import structlog
from prometheus_client import (
    CONTENT_TYPE_LATEST,
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    generate_latest,
)

if TYPE_CHECKING:
    from config import Settings

METRICS_CONTENT_TYPE = CONTENT_TYPE_LATEST

_SHARED_PROCESSORS = [
    structlog.stdlib.filter_by_level,
    structlog.stdlib.add_logger_name,
    structlog.stdlib.add_log_level,
    structlog.stdlib.PositionalArgumentsFormatter(),
    structlog.processors.TimeStamper(fmt="iso"),
    structlog.processors.StackInfoRenderer(),
    structlog.processors.format_exc_info,
    structlog.processors.UnicodeDecoder(),
]


def configure_logging(settings: "Settings") -> None:
    """Setup stdlib handlers and the structlog processor chain"""
    level = getattr(logging, settings.log_level.value)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    # Console goes to stderr so command output on stdout stays clean
    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter("%(message)s"))
    root_logger.addHandler(console_handler)

    if settings.log_dir is not None:
        log_dir = Path(settings.log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_dir / "clockwatch.log",
            maxBytes=20 * 1024 * 1024,  # 20MB
            backupCount=3,
            encoding="utf-8",
        )
        file_handler.setLevel(level)
        file_handler.setFormatter(logging.Formatter("%(message)s"))
        root_logger.addHandler(file_handler)

    if settings.log_format.value == "json":
        renderer: Any = structlog.processors.JSONRenderer()
    else:
        renderer = structlog.dev.ConsoleRenderer(colors=False)

    structlog.configure(
        processors=[*_SHARED_PROCESSORS, renderer],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


class HarnessMetrics:
    """Prometheus metrics for one simulation run.

    Each instance owns its registry so several simulations in one process
    never register the same metric twice.
    """

    def __init__(self, latency_window: int = 100_000):
        self.registry = CollectorRegistry()
        self.start_time = time.monotonic()

        self.packets_total = Counter(
            "clockwatch_packets_total",
            "Telemetry packets received by the inference node",
            ["device", "status"],
            registry=self.registry,
        )
        self.decode_errors_total = Counter(
            "clockwatch_decode_errors_total",
            "Packets rejected by the wire decoder",
            ["code"],
            registry=self.registry,
        )
        self.detections_total = Counter(
            "clockwatch_detections_total",
            "Fired detections",
            ["device"],
            registry=self.registry,
        )
        self.inference_latency = Histogram(
            "clockwatch_inference_latency_seconds",
            "Per-packet receive-to-decision latency",
            buckets=(0.0005, 0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 1.0),
            registry=self.registry,
        )
        self.active_devices = Gauge(
            "clockwatch_active_devices",
            "Devices with a live sensor stream",
            registry=self.registry,
        )

        self.packet_counts: Dict[int, int] = defaultdict(int)
        self.error_counts: Dict[str, int] = defaultdict(int)
        self.detection_counts: Dict[int, int] = defaultdict(int)
        self.latencies_ms: Deque[float] = deque(maxlen=latency_window)

    def record_packet(self, device_id: int) -> None:
        self.packets_total.labels(device=str(device_id), status="decoded").inc()
        self.packet_counts[device_id] += 1

    def record_decode_error(self, code: str) -> None:
        self.decode_errors_total.labels(code=code).inc()
        self.error_counts[code] += 1

    def record_detection(self, device_id: int) -> None:
        self.detections_total.labels(device=str(device_id)).inc()
        self.detection_counts[device_id] += 1

    def record_latency(self, seconds: float) -> None:
        self.inference_latency.observe(seconds)
        self.latencies_ms.append(seconds * 1000.0)

    def set_active_devices(self, count: int) -> None:
        self.active_devices.set(count)

    def latency_summary(self) -> Dict[str, float]:
        """Mean and p95 latency in milliseconds"""
        if not self.latencies_ms:
            return {"count": 0, "mean_ms": 0.0, "p95_ms": 0.0}
        values = np.fromiter(self.latencies_ms, dtype=np.float64)
        return {
            "count": int(values.size),
            "mean_ms": float(values.mean()),
            "p95_ms": float(np.percentile(values, 95)),
        }

    def snapshot(self) -> Dict[str, Any]:
        """Status view used by the status server"""
        return {
            "uptime": time.monotonic() - self.start_time,
            "packets": {str(k): v for k, v in sorted(self.packet_counts.items())},
            "decode_errors": dict(self.error_counts),
            "detections": {str(k): v for k, v in sorted(self.detection_counts.items())},
            "latency": self.latency_summary(),
        }

    def get_prometheus_metrics(self) -> bytes:
        """Get Prometheus formatted metrics"""
        return generate_latest(self.registry)


_current_metrics: Optional[HarnessMetrics] = None


def get_harness_metrics() -> Optional[HarnessMetrics]:
    """Metrics of the simulation currently running, if any"""
    return _current_metrics


def set_harness_metrics(metrics: Optional[HarnessMetrics]) -> None:
    global _current_metrics
    _current_metrics = metrics
