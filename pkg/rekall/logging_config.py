"""
Centralized logging configuration for rekall.

This module provides consistent logging setup across all modules with:
- Structured console format
- Log rotation for run log files
- Different log levels for different modules
- Optional JSON logging for batch jobs
- A run tag on every console record while a run trains
- Line-delimited metrics records that are byte-stable across seeded runs
"""

import json
import logging
import logging.handlers
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any

# LogRecord attributes that are never part of a structured payload
_RESERVED_ATTRS = frozenset(
    [
        "name",
        "msg",
        "args",
        "created",
        "filename",
        "funcName",
        "levelname",
        "lineno",
        "module",
        "exc_info",
        "exc_text",
        "stack_info",
        "pathname",
        "processName",
        "process",
        "threadName",
        "thread",
        "taskName",
        "getMessage",
        "levelno",
        "msecs",
        "relativeCreated",
        "iso_time",
        "rel_path",
        "run_tag",
        "message",
    ]
)


def _extra_fields(record: logging.LogRecord) -> dict[str, Any]:
    return {k: v for k, v in record.__dict__.items() if k not in _RESERVED_ATTRS}


class RunContextFilter(logging.Filter):
    """
    Stamp records with the name of the run being trained.

    Suites train several runs in one console; the stamp keeps their lines apart.
    Records that already carry a ``run`` field keep it.
    """

    def __init__(self, run_name: str):
        super().__init__()
        self.run_name = run_name

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "run"):
            record.run = self.run_name
        return True


@contextmanager
def run_logging(run_name: str) -> Iterator[RunContextFilter]:
    """
    Attach a :class:`RunContextFilter` to every root handler while a run trains.

    Record logs (metrics, audit) do not propagate to the root logger and stay
    untouched.

    :param run_name: Name of the run
    :type run_name: str
    """
    run_filter = RunContextFilter(run_name)
    handlers = list(logging.getLogger().handlers)
    for handler in handlers:
        handler.addFilter(run_filter)
    try:
        yield run_filter
    finally:
        for handler in handlers:
            handler.removeFilter(run_filter)


class StructuredFormatter(logging.Formatter):
    """
    Console formatter: ISO time, source location relative to the working
    directory, and a ``[run]`` tag when a run is training.
    """

    def format(self, record: logging.LogRecord) -> str:
        record.iso_time = datetime.fromtimestamp(record.created).isoformat()
        run = getattr(record, "run", None)
        record.run_tag = f"[{run}] " if run else ""

        if record.pathname:
            try:
                record.rel_path = Path(record.pathname).relative_to(Path.cwd())
            except ValueError:
                record.rel_path = Path(record.pathname).name
        else:
            record.rel_path = record.filename

        return super().format(record)


class JSONFormatter(logging.Formatter):
    """
    One JSON object per record for unattended suites; extra fields, such as
    the ``run`` stamped by :class:`RunContextFilter`, sit next to the message.
    """

    def format(self, record: logging.LogRecord) -> str:
        log_obj: dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        if record.exc_info:
            log_obj["exception"] = self.formatException(record.exc_info)

        log_obj.update(_extra_fields(record))

        return json.dumps(log_obj, default=str)


class MetricsFormatter(logging.Formatter):
    """
    Formatter for metrics and audit records.

    Emits only the ``extra`` payload of a record as one JSON object with sorted
    keys. No timestamps, process ids or source locations are written, so two
    runs with the same seed produce byte-identical files.
    """

    def format(self, record: logging.LogRecord) -> str:
        """Format the record's extra fields as a single JSON line."""
        return json.dumps(_extra_fields(record), sort_keys=True)


def setup_logging(
    log_level: str = "INFO",
    log_file: str | None = None,
    log_dir: str = "./logs",
    use_json: bool = False,
    module_levels: dict[str, str] | None = None,
) -> None:
    """
    Configure logging for the entire application.

    :param log_level: Default log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
    :type log_level: str
    :param log_file: Optional log file name (will be created in log_dir)
    :type log_file: Optional[str]
    :param log_dir: Directory for log files
    :type log_dir: str
    :param use_json: Whether to use JSON formatting
    :type use_json: bool
    :param module_levels: Optional dict of module-specific log levels
    :type module_levels: Optional[Dict[str, str]]
    """
    if log_file:
        Path(log_dir).mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, log_level.upper()))
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(getattr(logging, log_level.upper()))

    formatter: logging.Formatter
    if use_json:
        formatter = JSONFormatter()
    else:
        formatter = StructuredFormatter(
            fmt="%(iso_time)s | %(levelname)-8s | %(name)-20s | %(rel_path)s:%(lineno)d | %(funcName)s | %(run_tag)s%(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )

    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.handlers.RotatingFileHandler(
            Path(log_dir) / log_file,
            maxBytes=10 * 1024 * 1024,  # 10 MB
            backupCount=5,
        )
        file_handler.setLevel(getattr(logging, log_level.upper()))
        file_handler.setFormatter(formatter)
        root_logger.addHandler(file_handler)

    if module_levels:
        for module_name, level in module_levels.items():
            logging.getLogger(module_name).setLevel(getattr(logging, level.upper()))

    # Reduce noise from third-party libraries
    logging.getLogger("urllib3").setLevel(logging.WARNING)
    logging.getLogger("requests").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("torch").setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.info(
        f"Logging configured - Level: {log_level}, JSON: {use_json}, File: {log_file}"
    )


def get_logger(name: str) -> logging.Logger:
    """Logger for a rekall module (usually ``__name__``)."""
    return logging.getLogger(name)


def open_record_log(name: str, path: Path, truncate_to: int | None = None) -> logging.Logger:
    """
    Open a dedicated line-delimited JSON log (metrics, access audit).

    The returned logger does not propagate to the root logger; callers emit
    records with ``logger.info(event, extra={...})``.

    :param name: Logger name, unique per open file
    :type name: str
    :param path: File to append to
    :type path: Path
    :param truncate_to: Keep only the first N lines of an existing file
    :type truncate_to: Optional[int]

    :return: Logger bound to the file
    :rtype: logging.Logger
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    if truncate_to is not None and path.exists():
        kept = path.read_text(encoding="utf-8").splitlines(keepends=True)[:truncate_to]
        path.write_text("".join(kept), encoding="utf-8")

    record_logger = logging.getLogger(name)
    close_record_log(record_logger)
    record_logger.setLevel(logging.INFO)
    record_logger.propagate = False

    handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    handler.setFormatter(MetricsFormatter())
    record_logger.addHandler(handler)
    return record_logger


def close_record_log(record_logger: logging.Logger) -> None:
    """Flush and detach every handler of a record log."""
    for handler in list(record_logger.handlers):
        handler.flush()
        handler.close()
        record_logger.removeHandler(handler)


def setup_cli_logging(verbose: bool = False) -> None:
    """
    Console logging for the ``rekall`` command, configured from the environment.

    ``LOG_LEVEL`` and ``LOG_JSON`` select level and format; ``--verbose`` forces
    DEBUG for the ``rekall`` loggers.
    """
    from .config import Config

    setup_logging(
        log_level="DEBUG" if verbose else Config.LOG_LEVEL,
        use_json=Config.LOG_JSON,
        module_levels={"rekall": "DEBUG" if verbose else Config.LOG_LEVEL},
    )
