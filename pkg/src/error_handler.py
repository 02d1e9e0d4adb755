"""
Centralized error handling and logging utilities for FedCPC.

Provides the exception hierarchy shared by every module, structured error
logging, and the mapping from errors to CLI exit codes.
"""

import traceback
from collections.abc import Callable
from dataclasses import asdict, dataclass
from enum import Enum
from functools import wraps
from typing import Any

from .datetime_utils import utc_now, utc_now_iso
from .logging_config import get_logger

logger = get_logger(__name__)


class ErrorType(Enum):
    """Enumeration of error types for structured logging and handling."""

    CONFIG_ERROR = "config_error"
    CONTRACT_VIOLATION = "contract_violation"
    INVALID_SHAPE = "invalid_shape"
    INSUFFICIENT_AUDIO = "insufficient_audio"
    EMPTY_SEQUENCE = "empty_sequence"
    PROTOCOL_ERROR = "protocol_error"
    STRAGGLER = "straggler"
    DECODE_ERROR = "decode_error"
    IO_ERROR = "io_error"
    UNKNOWN_ERROR = "unknown_error"


class ExitCode(int, Enum):
    """Process exit codes of the command-line interface."""

    OK = 0
    CONFIG = 2
    PROTOCOL = 3
    IO = 4


@dataclass
class ErrorContext:
    """Structured error context for logging and debugging."""

    error_type: ErrorType
    client_id: str | None = None
    round: int | None = None
    path: str | None = None
    timestamp: str | None = None
    additional_data: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        if not self.timestamp:
            self.timestamp = utc_now_iso()


class FedCPCError(Exception):
    """Base exception class for FedCPC errors."""

    exit_code: ExitCode = ExitCode.CONFIG

    def __init__(
        self,
        message: str,
        error_type: ErrorType = ErrorType.UNKNOWN_ERROR,
        context: ErrorContext | None = None,
        recoverable: bool = False,
    ):
        super().__init__(message)
        self.error_type = error_type
        self.context = context or ErrorContext(error_type=error_type)
        self.recoverable = recoverable


class ConfigError(FedCPCError):
    """Invalid configuration, flags, or preconditions on the inputs of a run."""

    def __init__(self, message: str, **data: Any) -> None:
        context = ErrorContext(
            error_type=ErrorType.CONFIG_ERROR, additional_data=data or None
        )
        super().__init__(message, ErrorType.CONFIG_ERROR, context)


class ContractViolation(FedCPCError):
    """A caller broke a documented precondition."""

    def __init__(self, message: str) -> None:
        super().__init__(message, ErrorType.CONTRACT_VIOLATION)


class InvalidShapeError(FedCPCError):
    """Tensor shapes do not satisfy an operation's constraints."""

    def __init__(self, message: str, *shapes: tuple[int, ...]) -> None:
        context = ErrorContext(
            error_type=ErrorType.INVALID_SHAPE,
            additional_data={"shapes": [list(s) for s in shapes]} if shapes else None,
        )
        super().__init__(message, ErrorType.INVALID_SHAPE, context)


class InsufficientAudioError(FedCPCError):
    """Audio is shorter than an operation requires."""

    def __init__(self, message: str, n_samples: int, required: int) -> None:
        context = ErrorContext(
            error_type=ErrorType.INSUFFICIENT_AUDIO,
            additional_data={"n_samples": n_samples, "required": required},
        )
        super().__init__(message, ErrorType.INSUFFICIENT_AUDIO, context)


class EmptySequenceError(FedCPCError):
    """A recurrent network received a zero-length sequence."""

    def __init__(self, message: str = "input sequence is empty") -> None:
        super().__init__(message, ErrorType.EMPTY_SEQUENCE)


class ProtocolError(FedCPCError):
    """Federation protocol violation."""

    exit_code = ExitCode.PROTOCOL

    def __init__(
        self,
        message: str,
        error_type: ErrorType = ErrorType.PROTOCOL_ERROR,
        client_id: str | None = None,
        round: int | None = None,
        **data: Any,
    ) -> None:
        context = ErrorContext(
            error_type=error_type,
            client_id=client_id,
            round=round,
            additional_data=data or None,
        )
        super().__init__(message, error_type, context)


class StragglerError(ProtocolError):
    """Clients failed to report within the round timeout."""

    def __init__(self, round: int, missing: list[str]) -> None:
        self.missing = sorted(missing)
        super().__init__(
            f"round {round} aborted, missing updates from: {', '.join(self.missing)}",
            ErrorType.STRAGGLER,
            round=round,
            missing=self.missing,
        )


class WeightsDecodeError(ProtocolError):
    """A weights buffer could not be decoded."""

    def __init__(self, message: str, **data: Any) -> None:
        super().__init__(message, ErrorType.DECODE_ERROR, **data)


class BadMagicError(WeightsDecodeError):
    """Buffer does not start with the weights magic."""


class UnsupportedVersionError(WeightsDecodeError):
    """Buffer declares a format version this build cannot read."""


class TruncatedError(WeightsDecodeError):
    """Buffer ends before the declared content."""


class TrailingBytesError(WeightsDecodeError):
    """Buffer carries bytes after the checksum."""


class ChecksumError(WeightsDecodeError):
    """CRC32 over the buffer does not match the stored value."""


class ArtifactIOError(FedCPCError):
    """Reading or writing a run artifact failed."""

    exit_code = ExitCode.IO

    def __init__(self, message: str, path: str | None = None) -> None:
        context = ErrorContext(error_type=ErrorType.IO_ERROR, path=path)
        super().__init__(message, ErrorType.IO_ERROR, context)


def exit_code_for(error: BaseException) -> ExitCode:
    """Map an exception onto the CLI exit code contract."""
    if isinstance(error, FedCPCError):
        return error.exit_code
    if isinstance(error, OSError):
        return ExitCode.IO
    return ExitCode.CONFIG


def log_error(
    error: Exception, context: ErrorContext | None = None, level: str = "ERROR"
) -> str:
    """
    Log an error with structured context information.

    Args:
        error: The exception to log
        context: Optional error context
        level: Log level (ERROR, WARNING, CRITICAL)

    Returns:
        Error ID for tracking
    """
    error_id = f"err_{int(utc_now().timestamp())}"

    log_data = {
        "error_id": error_id,
        "error_message": str(error),
        "error_type": getattr(error, "error_type", ErrorType.UNKNOWN_ERROR).value,
        "error_class": error.__class__.__name__,
        "traceback": traceback.format_exc(),
        "recoverable": getattr(error, "recoverable", False),
    }

    if context:
        log_data.update(asdict(context))
    elif getattr(error, "context", None):
        log_data.update(asdict(error.context))
    log_data["error_type"] = str(log_data["error_type"])

    if level == "CRITICAL":
        logger.critical("critical_error", **log_data)
    elif level == "WARNING":
        logger.warning("warning_error", **log_data)
    else:
        logger.error("error", **log_data)

    return error_id


def with_error_handling(func: Callable[..., Any]) -> Callable[..., Any]:
    """
    Decorator for adding error handling to functions.

    FedCPC errors are logged and re-raised untouched; anything else is logged
    and re-raised as a FedCPCError chained to the original.
    """

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except FedCPCError as e:
            log_error(e)
            raise
        except OSError as e:
            log_error(e)
            raise ArtifactIOError(str(e), getattr(e, "filename", None)) from e
        except Exception as e:
            logger.error(
                "unhandled_error",
                function_name=func.__name__,
                error_message=str(e),
                exc_info=True,
            )
            raise FedCPCError(
                f"Unexpected error in {func.__name__}: {e}", ErrorType.UNKNOWN_ERROR
            ) from e

    return wrapper
