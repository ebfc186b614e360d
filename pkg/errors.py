"""
Exception hierarchy for clockwatch.
Every error carries the process exit code the CLI should use for it.
"""

from enum import Enum
from typing import Any, Dict, List, Optional


class ClockwatchError(Exception):
    """Base class for all toolkit errors"""

    exit_code: int = 1

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context

    def __str__(self) -> str:
        if not self.context:
            return self.message
        details = ", ".join(f"{k}={v}" for k, v in self.context.items())
        return f"{self.message} ({details})"


class ValidationError(ClockwatchError, ValueError):
    """Invalid input: shapes, ranges, lengths, labels"""

    exit_code = 2


class ConfigError(ValidationError):
    """Config file missing or failing schema validation"""

    def __init__(self, message: str, errors: Optional[List[str]] = None, **context: Any):
        super().__init__(message, **context)
        self.errors: List[str] = errors or []

    def __str__(self) -> str:
        base = super().__str__()
        if not self.errors:
            return base
        return base + "\n" + "\n".join(f"  - {e}" for e in self.errors)


class DatasetFormatError(ValidationError):
    """Dataset files that cannot be read back"""

    def __init__(
        self,
        message: str,
        column: Optional[str] = None,
        line: Optional[int] = None,
        **context: Any,
    ):
        if column is not None:
            context["column"] = column
        if line is not None:
            context["line"] = line
        super().__init__(message, **context)
        self.column = column
        self.line = line


class StatisticsError(ValidationError):
    """Degenerate input to a statistical procedure"""


class TrainingDivergedError(ClockwatchError):
    """Loss became non-finite during training"""

    def __init__(self, epoch: int, batch: int, breakdown: Dict[str, float]):
        super().__init__("training diverged", epoch=epoch, batch=batch)
        self.epoch = epoch
        self.batch = batch
        self.breakdown = breakdown


class DecodeErrorCode(str, Enum):
    BAD_MAGIC = "bad_magic"
    BAD_VERSION = "bad_version"
    BAD_LENGTH = "bad_length"
    BAD_CRC = "bad_crc"
    BAD_FIELD = "bad_field"


class WireDecodeError(ClockwatchError, ValueError):
    """Telemetry packet rejected by the decoder"""

    def __init__(self, code: DecodeErrorCode, message: str):
        super().__init__(message, code=code.value)
        self.code = code


class TransportError(ClockwatchError):
    """Sensor could not deliver packets after bounded retries"""
