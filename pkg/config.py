"""
Configuration management for clockwatch.
Runtime settings come from pydantic-settings; experiment configs are JSON
files validated against the pydantic models below.
"""

import json
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Type, TypeVar

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from clockdyn import ClockParams
from datagen import PhysicalConfig, ScenarioKind, Topology
from detector import DetectorParams
from errors import ConfigError
from harness import NodeConfig, TransportMode
from stgat import HyperParams

logger = structlog.get_logger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class LogLevel(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class LogFormat(str, Enum):
    CONSOLE = "console"
    JSON = "json"


class Settings(BaseSettings):
    """Runtime settings (logging and threading only)"""

    log_level: LogLevel = Field(default=LogLevel.INFO)
    log_format: LogFormat = Field(default=LogFormat.CONSOLE)
    log_dir: Optional[Path] = Field(default=None, description="Directory for rotating log files")
    torch_threads: int = Field(default=1, ge=1, le=64)

    model_config = SettingsConfigDict(
        env_prefix="CLOCKWATCH_",
        case_sensitive=False,
        extra="ignore",
    )


class _ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GenerateConfig(_ExperimentConfig):
    """Dataset construction (drift-aware data pipeline)"""

    seed: int = 0
    n_devices: int = Field(default=12, ge=3)
    length: int = Field(default=5000, ge=2)
    dt: float = Field(default=1.0, gt=0)
    start_time: float = Field(default=1_700_000_000.0, ge=0)
    window: int = Field(default=60, ge=1)
    stride: int = Field(default=30, ge=1)
    perturbed_fraction: float = Field(default=0.25, ge=0, le=1)
    scenarios: List[ScenarioKind] = Field(
        default_factory=lambda: [
            ScenarioKind.OFFSET_SHOCK,
            ScenarioKind.EPOCH_OVERFLOW,
            ScenarioKind.DRIFT_ESCALATION,
        ]
    )
    onset_range: List[float] = Field(default_factory=lambda: [0.3, 0.7], min_length=2, max_length=2)
    magnitudes: dict = Field(
        default_factory=lambda: {
            "drift_escalation": 20.0,
            "offset_shock": 2.0,
            "epoch_overflow": 0.0,
            "stealthy_drift": 0.0005,
        }
    )
    eps_t: float = Field(default=0.01, ge=0)
    eps_d: float = Field(default=0.001, ge=0)
    split_fractions: List[float] = Field(default_factory=lambda: [0.7, 0.1, 0.2], min_length=3, max_length=3)
    topology: Topology = Topology.K_NEAREST
    k: int = Field(default=2, ge=1)
    physical: PhysicalConfig = Field(default_factory=PhysicalConfig)
    clock: ClockParams = Field(default_factory=ClockParams)
    workers: int = Field(default=1, ge=1, le=32)

    @model_validator(mode="after")
    def _check_consistency(self) -> "GenerateConfig":
        lo, hi = self.onset_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ValueError("onset_range must satisfy 0 <= lo <= hi < 1")
        if self.window > self.length:
            raise ValueError(f"window ({self.window}) exceeds trace length ({self.length})")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must sum to 1")
        if self.topology == Topology.K_NEAREST and self.k >= self.n_devices:
            raise ValueError(f"k ({self.k}) must be smaller than n_devices ({self.n_devices})")
        return self


class TrainConfig(_ExperimentConfig):
    """Detector training"""

    hyper: HyperParams = Field(default_factory=HyperParams)
    window_threshold: float = Field(default=0.5, gt=0, lt=1)


class DetectConfig(_ExperimentConfig):
    """Online detector replay"""

    detector: DetectorParams = Field(default_factory=DetectorParams)
    window_threshold: float = Field(default=0.5, gt=0, lt=1)


class SimulationConfig(_ExperimentConfig):
    """Multi-node testbed emulation"""

    nodes: List[NodeConfig] = Field(default_factory=list)
    detector: DetectorParams = Field(default_factory=DetectorParams)
    ticks: int = Field(default=60, ge=1)
    mode: TransportMode = TransportMode.IN_PROCESS
    host: str = "127.0.0.1"
    port: int = Field(default=0, ge=0, le=65535)
    real_time: bool = False
    step_threshold: float = Field(default=0.05, gt=0)
    checkpoint: Optional[Path] = None
    kill_after: Dict[int, int] = Field(default_factory=dict, description="device_id -> ticks sent before the sensor dies")
    topology: Topology = Topology.RING

    @model_validator(mode="after")
    def _check_nodes(self) -> "SimulationConfig":
        ids = [n.device_id for n in self.nodes]
        if not ids:
            raise ValueError("at least one node is required")
        if self.topology == Topology.EXPLICIT:
            raise ValueError("explicit topology is not supported for simulations")
        if self.topology == Topology.K_NEAREST and len(ids) <= 2:
            raise ValueError("k_nearest topology needs more than two nodes")
        if len(ids) != len(set(ids)):
            raise ValueError("device ids must be unique")
        for node in self.nodes:
            if node.scenario.onset >= self.ticks and node.scenario.kind != ScenarioKind.NOMINAL:
                raise ValueError(f"node {node.device_id}: onset {node.scenario.onset} beyond {self.ticks} ticks")
        return self


def load_config(path: Path, model: Type[ModelT]) -> ModelT:
    """Load and validate a JSON experiment config"""
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", path=str(path))
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError("config file is not valid JSON", path=str(path), line=e.lineno) from e
    try:
        config = model.model_validate(raw)
    except PydanticValidationError as e:
        messages = [
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        ]
        raise ConfigError(f"invalid {model.__name__}", errors=messages, path=str(path)) from e

    logger.info("config_loaded", path=str(path), kind=model.__name__)
    return config


def dump_config(config: BaseModel, path: Path) -> None:
    """Write a config back as JSON (used to record the config next to results)"""
    Path(path).write_text(config.model_dump_json(indent=2) + "\n", encoding="utf-8")


_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get global settings instance"""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def override_settings(**kwargs) -> Settings:
    """Replace global settings (CLI flags win over the environment)"""
    global _settings
    base = get_settings().model_dump()
    base.update({k: v for k, v in kwargs.items() if v is not None})
    _settings = Settings(**base)
    return _settings


