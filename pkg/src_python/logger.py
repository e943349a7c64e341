import logging
import sys
import os
from pathlib import Path
from pythonjsonlogger import jsonlogger
from contextvars import ContextVar
from typing import Optional

# Per-invocation and per-fold log context
run_id_var: ContextVar[Optional[str]] = ContextVar('run_id', default=None)
fold_var: ContextVar[Optional[int]] = ContextVar('fold', default=None)


class ContextualJsonFormatter(jsonlogger.JsonFormatter):
    """JSON records tagged with the active run and fold."""

    def add_fields(self, log_record, record, message_dict):
        super().add_fields(log_record, record, message_dict)

        run_id = run_id_var.get()
        if run_id:
            log_record['run_id'] = run_id

        fold = fold_var.get()
        if fold is not None:
            log_record['fold'] = fold

        log_record['environment'] = os.getenv('ENVIRONMENT', 'development')

        if not log_record.get('level'):
            log_record['level'] = record.levelname


class ContextualPlainFormatter(logging.Formatter):
    """Plain text formatter that prefixes the fold when one is active."""

    def format(self, record):
        message = super().format(record)
        fold = fold_var.get()
        if fold is not None:
            return f"{message} [fold={fold}]"
        return message


def _plain_formatter():
    return ContextualPlainFormatter(
        '[%(asctime)s] [%(levelname)s] %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )


def _json_formatter():
    return ContextualJsonFormatter(
        '%(asctime)s %(name)s %(levelname)s %(message)s',
        rename_fields={'asctime': 'timestamp', 'levelname': 'level', 'name': 'logger'}
    )


def setup_logger(name="gaitlpr", log_file=None, level=logging.INFO, use_json=True):
    """
    Returns the named logger with a stdout handler and, when `log_file` is given, a file handler.

    Args:
        name: Logger name
        log_file: Optional extra log file (GAIT_LOG_FILE)
        level: Logging level
        use_json: JSON records for production, `[time] [LEVEL] message` otherwise
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # idempotent: handlers are installed once per process
    if logger.hasHandlers():
        return logger

    formatter = _json_formatter() if use_json else _plain_formatter()

    if log_file:
        file_handler = logging.FileHandler(Path(log_file), encoding='utf-8')
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


def attach_run_log(log_file) -> logging.Handler:
    """Adds a plain-text file handler (one per run directory) to the default logger."""
    handler = logging.FileHandler(Path(log_file), encoding='utf-8')
    handler.setFormatter(_plain_formatter())
    logger.addHandler(handler)
    return handler


def detach_handler(handler: logging.Handler):
    logger.removeHandler(handler)
    handler.close()


def set_run_context(run_id: str):
    """Tag every following record with the CLI invocation id."""
    run_id_var.set(run_id)


def set_fold_context(fold: Optional[int]):
    """Tag records from the current fold worker; `None` clears the tag."""
    fold_var.set(fold)


def clear_context():
    """Reset run and fold tags."""
    run_id_var.set(None)
    fold_var.set(None)


# Module-wide logger; ENVIRONMENT=production switches to JSON
use_json_logs = os.getenv('ENVIRONMENT', 'development') == 'production'
logger = setup_logger(log_file=os.getenv('GAIT_LOG_FILE') or None, use_json=use_json_logs)
