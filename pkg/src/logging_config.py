"""
Centralized Logging Configuration Module

One line per record, pipe-delimited, with the run id of the CLI invocation so
that a bench run's log lines can be matched to its report rows:

    timestamp | level | logger | run_id | message | context

The context column lists whichever of the known numeric-run fields a record
carries (passed through `extra=`), in a fixed order:

    2026-01-01 10:15:30.123 | INFO   | src.bench_runner          | 3f2a9c1e | Cell measured | variant=imp6 batch=100 images_per_sec=812.4

Console output goes to stderr; stdout belongs to CSV/JSON reports.

Invoked by: vcnn, and every module through get_logger()
Invokes: None
"""

import logging
import logging.handlers
import sys
from contextvars import ContextVar
from datetime import datetime
from pathlib import Path
from typing import List, Optional

LOG_FILE_NAME = 'vcnn.log'
LOG_FILE_MAX_BYTES = 20 * 1024 * 1024
LOG_FILE_BACKUPS = 5
NO_RUN_ID = 'N/A'

run_id_var: ContextVar[Optional[str]] = ContextVar('run_id', default=None)


class RunIdFilter(logging.Filter):
    """Stamp each record with the run id of the current context."""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = run_id_var.get() or NO_RUN_ID
        return True


class PipeDelimitedFormatter(logging.Formatter):
    """
    Aligned pipe-delimited lines; tracebacks and stack info follow on new lines.
    """

    LEVEL_WIDTH = 6
    LOGGER_WIDTH = 25
    RUN_ID_WIDTH = 8

    CONTEXT_FIELDS = ('scale', 'variant', 'mode', 'batch', 'epoch', 'layer', 'loss',
                      'images_per_sec', 'duration_ms', 'operation', 'path', 'error_type')

    @classmethod
    def _logger_column(cls, name: str) -> str:
        if len(name) > cls.LOGGER_WIDTH:
            return name[:cls.LOGGER_WIDTH - 3] + '...'
        return name.ljust(cls.LOGGER_WIDTH)

    @classmethod
    def context(cls, record: logging.LogRecord) -> str:
        """key=value pairs for the context fields present on the record."""
        pairs = []
        for key in cls.CONTEXT_FIELDS:
            value = getattr(record, key, None)
            if value is None:
                continue
            pairs.append(f"{key}={value:.4g}" if isinstance(value, float) else f"{key}={value}")
        return ' '.join(pairs)

    def format(self, record: logging.LogRecord) -> str:
        columns: List[str] = [
            datetime.fromtimestamp(record.created).strftime('%Y-%m-%d %H:%M:%S.%f')[:-3],
            record.levelname.ljust(self.LEVEL_WIDTH),
            self._logger_column(record.name),
            str(getattr(record, 'run_id', NO_RUN_ID)).ljust(self.RUN_ID_WIDTH),
            record.getMessage(),
        ]
        context = self.context(record)
        if context:
            columns.append(context)
        line = ' | '.join(columns)

        if record.exc_info and not record.exc_text:
            record.exc_text = self.formatException(record.exc_info)
        trailers = [record.exc_text] if record.exc_text else []
        if record.stack_info:
            trailers.append(self.formatStack(record.stack_info))
        return '\n'.join([line] + trailers)


class LoggingConfig:
    """
    Root logger setup: a stderr handler, plus a rotating vcnn.log when
    log_to_file is set. Re-running replaces the handlers of the previous setup.
    """

    def __init__(self, log_dir: str = './logs', log_level: str = 'INFO', log_to_file: bool = True):
        """
        Args:
            log_dir: Directory for vcnn.log (created when log_to_file is set)
            log_level: DEBUG, INFO, WARNING, ERROR or CRITICAL (any case)
            log_to_file: Also write vcnn.log under log_dir
        """
        self.log_dir = Path(log_dir)
        self.log_level = getattr(logging, log_level.upper(), logging.INFO)
        self.log_to_file = log_to_file
        self._install()

    def _handlers(self) -> List[logging.Handler]:
        handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
        if self.log_to_file:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            handlers.append(logging.handlers.RotatingFileHandler(
                filename=self.log_dir / LOG_FILE_NAME, maxBytes=LOG_FILE_MAX_BYTES,
                backupCount=LOG_FILE_BACKUPS, encoding='utf-8'))
        return handlers

    def _install(self) -> None:
        root = logging.getLogger()
        for old in list(root.handlers):
            root.removeHandler(old)
            if any(isinstance(f, RunIdFilter) for f in old.filters):
                old.close()
        root.setLevel(self.log_level)

        formatter = PipeDelimitedFormatter()
        for handler in self._handlers():
            handler.setLevel(self.log_level)
            handler.setFormatter(formatter)
            handler.addFilter(RunIdFilter())
            root.addHandler(handler)


_logging_config: Optional[LoggingConfig] = None


def setup_logging(log_dir: str = './logs', log_level: str = 'INFO', log_to_file: bool = True) -> LoggingConfig:
    """Configure the root logger once per process (the CLI calls this at startup)."""
    global _logging_config  # pylint: disable=global-statement
    _logging_config = LoggingConfig(log_dir=log_dir, log_level=log_level, log_to_file=log_to_file)
    return _logging_config


def get_logger(name: str) -> logging.Logger:
    """Named logger; falls back to console-only logging when nothing was set up."""
    if _logging_config is None:
        setup_logging(log_to_file=False)
    return logging.getLogger(name)


def set_run_id(run_id: Optional[str]) -> None:
    run_id_var.set(run_id)


def clear_run_id() -> None:
    run_id_var.set(None)


def get_run_id() -> Optional[str]:
    return run_id_var.get()
