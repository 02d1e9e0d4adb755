"""
Structured logging configuration using structlog.

Configures structlog on top of the stdlib logging module so that console
output, per-run log files and third-party loggers share one pipeline:
readable console output during development, JSON when LOG_JSON is set and
always JSON lines in run directories.
"""

import logging
import sys
from pathlib import Path
from typing import Any, cast

import structlog

_SHARED_PROCESSORS: list[Any] = [
    structlog.contextvars.merge_contextvars,
    structlog.stdlib.add_logger_name,
    structlog.stdlib.add_log_level,
    structlog.processors.TimeStamper(fmt="ISO"),
    structlog.processors.StackInfoRenderer(),
]


def configure_structlog(
    log_level: str = "INFO", json_logs: bool = False, include_stdlib_logs: bool = True
) -> None:
    """
    Configure structlog for the application.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        json_logs: Whether to output logs in JSON format
        include_stdlib_logs: Whether to route standard library logs through the
            same renderer
    """
    callsite = structlog.processors.CallsiteParameterAdder(
        [
            structlog.processors.CallsiteParameter.FILENAME,
            structlog.processors.CallsiteParameter.FUNC_NAME,
        ]
        + ([] if json_logs else [structlog.processors.CallsiteParameter.LINENO])
    )

    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            *_SHARED_PROCESSORS,
            callsite,
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        wrapper_class=structlog.stdlib.BoundLogger,
        logger_factory=structlog.stdlib.LoggerFactory(),
        context_class=dict,
        cache_logger_on_first_use=True,
    )

    level = getattr(logging, log_level.upper(), logging.INFO)
    root_logger = logging.getLogger()
    # run.log files record INFO even when the console is quieter
    root_logger.setLevel(min(level, logging.INFO) if include_stdlib_logs else level)

    if include_stdlib_logs:
        renderer: Any = (
            structlog.processors.JSONRenderer()
            if json_logs
            else structlog.dev.ConsoleRenderer(colors=False)
        )
        formatter = structlog.stdlib.ProcessorFormatter(
            processors=[
                structlog.stdlib.ProcessorFormatter.remove_processors_meta,
                structlog.processors.format_exc_info,
                renderer,
            ],
            foreign_pre_chain=_SHARED_PROCESSORS,
        )

        for handler in list(root_logger.handlers):
            if getattr(handler, "_fedcpc_console", False):
                root_logger.removeHandler(handler)
        handler = logging.StreamHandler(sys.stderr)
        handler.setLevel(level)
        handler.setFormatter(formatter)
        handler._fedcpc_console = True  # type: ignore[attr-defined]
        root_logger.addHandler(handler)

        # Set levels for noisy third-party libraries
        logging.getLogger("numba").setLevel(logging.WARNING)
        logging.getLogger("matplotlib").setLevel(logging.WARNING)
        logging.getLogger("urllib3").setLevel(logging.WARNING)


def add_run_log_file(path: Path) -> logging.Handler:
    """
    Attach a JSON-lines log file for one run directory.

    Returns the handler so callers can detach it when the run ends.
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    formatter = structlog.stdlib.ProcessorFormatter(
        processors=[
            structlog.stdlib.ProcessorFormatter.remove_processors_meta,
            structlog.processors.format_exc_info,
            structlog.processors.JSONRenderer(),
        ],
        foreign_pre_chain=_SHARED_PROCESSORS,
    )
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(formatter)
    logging.getLogger().addHandler(handler)
    return handler


def remove_handler(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def get_logger(name: str | None = None) -> structlog.stdlib.BoundLogger:
    """
    Get a configured structlog logger.

    Args:
        name: Logger name (defaults to calling module)

    Returns:
        Configured structlog logger
    """
    return cast(structlog.stdlib.BoundLogger, structlog.get_logger(name))


def add_global_context(**kwargs: Any) -> None:
    """
    Add context that will be included in all log messages of this thread.

    Args:
        **kwargs: Key-value pairs to add to global context
    """
    structlog.contextvars.bind_contextvars(**kwargs)


def clear_global_context() -> None:
    structlog.contextvars.clear_contextvars()


class LogContext:
    """Context manager for adding temporary structured logging context."""

    def __init__(self, logger: structlog.stdlib.BoundLogger, **context: Any):
        self.logger = logger
        self.context = context
        self.bound_logger: structlog.stdlib.BoundLogger | None = None

    def __enter__(self) -> structlog.stdlib.BoundLogger:
        self.bound_logger = self.logger.bind(**self.context)
        return self.bound_logger

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        pass


def with_context(logger: structlog.stdlib.BoundLogger, **context: Any) -> LogContext:
    """
    Create a log context manager.

    Usage:
        logger = get_logger(__name__)
        with with_context(logger, round=3, client_id="client-0") as log:
            log.info("local_training_started")

    Args:
        logger: The base logger
        **context: Context to add to log messages

    Returns:
        LogContext manager
    """
    return LogContext(logger, **context)


def auto_configure() -> None:
    """Configure logging from environment settings."""
    from .settings import settings

    level = settings.LOG_LEVEL
    if settings.IS_TEST_ENV and level == "INFO":
        level = "DEBUG"
    configure_structlog(
        log_level=level,
        json_logs=settings.LOG_JSON,
        include_stdlib_logs=True,
    )


# Initialize logging when module is imported
auto_configure()
