"""
Aseg Structured Logging
=======================
JSON-structured logging with bound context fields, log levels,
and console or file output.

Usage:
    from aseg.logging import get_logger, configure_logging

    logger = get_logger("aseg.training")
    logger.info("Stage finished", stage=2, iterations=1000)

    with StageTimer(logger, "prune", fraction=0.1):
        ...
"""

import json
import os
import sys
import threading
import time
import traceback as tb_module
from datetime import datetime, timezone
from enum import IntEnum
from typing import IO, Any, Dict, List, Optional


class LogLevel(IntEnum):
    """Log levels ordered by severity."""
    DEBUG = 10
    INFO = 20
    WARNING = 30
    ERROR = 40
    CRITICAL = 50


LEVEL_NAMES = {
    "debug": LogLevel.DEBUG,
    "info": LogLevel.INFO,
    "warning": LogLevel.WARNING,
    "warn": LogLevel.WARNING,
    "error": LogLevel.ERROR,
    "critical": LogLevel.CRITICAL,
}

LEVEL_LABELS = {
    LogLevel.DEBUG: "DEBUG",
    LogLevel.INFO: "INFO",
    LogLevel.WARNING: "WARN",
    LogLevel.ERROR: "ERROR",
    LogLevel.CRITICAL: "CRITICAL",
}

LEVEL_COLORS = {
    LogLevel.DEBUG: "\033[90m",
    LogLevel.INFO: "\033[36m",
    LogLevel.WARNING: "\033[33m",
    LogLevel.ERROR: "\033[31m",
    LogLevel.CRITICAL: "\033[1;31m",
}
RESET = "\033[0m"


class LogRecord:
    """A single log record."""

    __slots__ = ("level", "message", "logger_name", "timestamp", "extra", "exc_info")

    def __init__(self, level: LogLevel, message: str, logger_name: str,
                 extra: Optional[Dict[str, Any]] = None,
                 exc_info: Optional[str] = None):
        self.level = level
        self.message = message
        self.logger_name = logger_name
        self.timestamp = datetime.now(timezone.utc)
        self.extra = extra or {}
        self.exc_info = exc_info


class LogFormatter:
    """Base log formatter."""

    def format(self, record: LogRecord) -> str:
        raise NotImplementedError


class JSONFormatter(LogFormatter):
    """One JSON object per line; used for run.log files."""

    def __init__(self, include_timestamp: bool = True):
        self.include_timestamp = include_timestamp

    def format(self, record: LogRecord) -> str:
        data: Dict[str, Any] = {
            "level": LEVEL_LABELS.get(record.level, "UNKNOWN"),
            "logger": record.logger_name,
            "message": record.message,
        }
        if self.include_timestamp:
            data["timestamp"] = record.timestamp.isoformat()
        if record.extra:
            data.update(record.extra)
        if record.exc_info:
            data["exception"] = record.exc_info
        return json.dumps(data, default=str)


class ConsoleFormatter(LogFormatter):
    """Human-readable single-line formatter for terminals."""

    def __init__(self, colorize: bool = True, show_timestamp: bool = True):
        self.colorize = colorize and sys.stderr.isatty()
        self.show_timestamp = show_timestamp

    def _dim(self, text: str) -> str:
        return f"\033[90m{text}{RESET}" if self.colorize else text

    def format(self, record: LogRecord) -> str:
        parts = []
        if self.show_timestamp:
            parts.append(self._dim(record.timestamp.strftime("%H:%M:%S.%f")[:-3]))

        label = LEVEL_LABELS.get(record.level, "???").ljust(8)
        if self.colorize:
            label = f"{LEVEL_COLORS.get(record.level, '')}{label}{RESET}"
        parts.append(label)

        if record.logger_name:
            parts.append(self._dim(f"[{record.logger_name}]"))
        parts.append(record.message)

        if record.extra:
            fields = " ".join(f"{k}={_short(v)}" for k, v in record.extra.items())
            parts.append(self._dim(fields))

        line = " ".join(parts)
        if record.exc_info:
            line += f"\n{record.exc_info}"
        return line


def _short(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return repr(value)


class LogHandler:
    """Base log handler."""

    def __init__(self, formatter: Optional[LogFormatter] = None,
                 level: LogLevel = LogLevel.DEBUG):
        self.formatter = formatter or ConsoleFormatter()
        self.level = level

    def emit(self, record: LogRecord) -> None:
        raise NotImplementedError

    def should_handle(self, record: LogRecord) -> bool:
        return record.level >= self.level

    def close(self) -> None:
        pass


class StreamHandler(LogHandler):
    """Writes logs to a stream (stderr by default, stdout stays for tables)."""

    def __init__(self, stream: Optional[IO[str]] = None, **kwargs: Any):
        super().__init__(**kwargs)
        self.stream = stream or sys.stderr
        self._lock = threading.Lock()

    def emit(self, record: LogRecord) -> None:
        if not self.should_handle(record):
            return
        msg = self.formatter.format(record)
        with self._lock:
            self.stream.write(msg + "\n")
            self.stream.flush()


class FileHandler(LogHandler):
    """Appends JSON lines to a file."""

    def __init__(self, filename: str, **kwargs: Any):
        kwargs.setdefault("formatter", JSONFormatter())
        super().__init__(**kwargs)
        self.filename = filename
        self._lock = threading.Lock()
        os.makedirs(os.path.dirname(filename) or ".", exist_ok=True)
        self._file: Optional[IO[str]] = open(filename, "a", encoding="utf-8")

    def emit(self, record: LogRecord) -> None:
        if not self.should_handle(record):
            return
        msg = self.formatter.format(record)
        with self._lock:
            if self._file:
                self._file.write(msg + "\n")
                self._file.flush()

    def close(self) -> None:
        with self._lock:
            if self._file:
                self._file.close()
                self._file = None


class Logger:
    """Structured logger with context support.

    Usage:
        logger = Logger("aseg.pruning")
        logger.info("Plan selected", pruned=42, floored=["decoder.conv_a"])
        run_log = logger.bind(run="20261019-a")
    """

    def __init__(self, name: str = "", level: LogLevel = LogLevel.DEBUG,
                 handlers: Optional[List[LogHandler]] = None):
        self.name = name
        self.level = level
        self.handlers: List[LogHandler] = handlers or []
        self._context: Dict[str, Any] = {}

    def bind(self, **kwargs: Any) -> "Logger":
        """Create a child logger that adds these fields to every record."""
        child = Logger(self.name, self.level, self.handlers)
        child._context = {**self._context, **kwargs}
        return child

    def is_enabled_for(self, level: LogLevel) -> bool:
        return level >= self.level

    def _log(self, level: LogLevel, message: str, exc_info: bool = False,
             **kwargs: Any) -> None:
        if level < self.level:
            return
        exc_text = None
        if exc_info:
            exc_text = tb_module.format_exc()
            if exc_text == "NoneType: None\n":
                exc_text = None
        record = LogRecord(level, message, self.name,
                           {**self._context, **kwargs}, exc_text)
        for handler in self.handlers:
            try:
                handler.emit(record)
            except (OSError, ValueError):
                pass

    def debug(self, message: str, **kwargs: Any) -> None:
        self._log(LogLevel.DEBUG, message, **kwargs)

    def info(self, message: str, **kwargs: Any) -> None:
        self._log(LogLevel.INFO, message, **kwargs)

    def warning(self, message: str, **kwargs: Any) -> None:
        self._log(LogLevel.WARNING, message, **kwargs)

    def error(self, message: str, exc_info: bool = False, **kwargs: Any) -> None:
        self._log(LogLevel.ERROR, message, exc_info=exc_info, **kwargs)

    def critical(self, message: str, exc_info: bool = False, **kwargs: Any) -> None:
        self._log(LogLevel.CRITICAL, message, exc_info=exc_info, **kwargs)


# ======================================================
# Global Logging Configuration
# ======================================================

_loggers: Dict[str, Logger] = {}
_default_handlers: List[LogHandler] = []
_default_level: LogLevel = LogLevel.INFO


def configure_logging(
    level: str = "info",
    format: str = "console",
    log_file: Optional[str] = None,
    colorize: bool = True,
) -> None:
    """Configure the global logging system.

    Args:
        level: Minimum log level ("debug", "info", "warning", "error", "critical")
        format: Console output format ("console" or "json")
        log_file: Optional JSON-lines file, e.g. ``<run dir>/run.log``
        colorize: ANSI colors on the console (TTY only)
    """
    global _default_level

    _default_level = LEVEL_NAMES.get(level.lower(), LogLevel.INFO)
    for handler in _default_handlers:
        handler.close()
    _default_handlers.clear()

    formatter: LogFormatter
    if format == "json":
        formatter = JSONFormatter()
    else:
        formatter = ConsoleFormatter(colorize=colorize)
    _default_handlers.append(StreamHandler(formatter=formatter, level=_default_level))

    if log_file:
        _default_handlers.append(FileHandler(log_file, level=_default_level))

    for logger in _loggers.values():
        logger.handlers = list(_default_handlers)
        logger.level = _default_level


def get_logger(name: str = "aseg") -> Logger:
    """Get or create a named logger."""
    if name not in _loggers:
        if not _default_handlers:
            configure_logging()
        _loggers[name] = Logger(name=name, level=_default_level,
                                handlers=list(_default_handlers))
    return _loggers[name]


# ======================================================
# Stage timing
# ======================================================

class StageTimer:
    """Logs the start, end and duration of a named stage.

    Usage:
        with StageTimer(logger, "fusion-stage", stage=3) as timer:
            train(...)
        timer.duration_ms
    """

    def __init__(self, logger: Optional[Logger], stage: str, **fields: Any):
        self.logger = logger or get_logger("aseg")
        self.stage = stage
        self.fields = fields
        self.duration_ms = 0.0
        self._start = 0.0

    def __enter__(self) -> "StageTimer":
        self._start = time.perf_counter()
        self.logger.debug(f"{self.stage} started", stage=self.stage, **self.fields)
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> bool:
        self.duration_ms = round((time.perf_counter() - self._start) * 1000, 2)
        if exc is None:
            self.logger.info(f"{self.stage} finished", stage=self.stage,
                             duration_ms=self.duration_ms, **self.fields)
        else:
            self.logger.error(f"{self.stage} failed", stage=self.stage,
                              duration_ms=self.duration_ms, error=str(exc),
                              **self.fields)
        return False
