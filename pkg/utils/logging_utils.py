"""
logging_utils.py
----------------

Centralised logging configuration for the rbpet toolkit.  Every module
obtains its logger through :func:`get_logger` so that simulation,
training, fitting and pipeline messages share one format.

Two output formats are supported:

* Human‑readable logs with ISO‑8601 timestamps and module names.
* JSON lines suitable for ingestion next to the training loss logs.

Set ``RBPET_LOG_JSON`` to a truthy value (e.g. ``1``) to enable JSON
output and ``RBPET_LOG_LEVEL`` (``DEBUG``, ``INFO``, ...) to override the
default level.
"""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from typing import Any, Dict, Iterator


class JsonFormatter(logging.Formatter):
    """Format log records as structured JSON."""

    def format(self, record: logging.LogRecord) -> str:
        log_dict: Dict[str, Any] = {
            'timestamp': self.formatTime(record, datefmt='%Y-%m-%dT%H:%M:%SZ'),
            'level': record.levelname,
            'name': record.name,
            'message': record.getMessage(),
        }
        stage = getattr(record, 'stage', None)
        if stage is not None:
            log_dict['stage'] = stage
        if record.exc_info:
            log_dict['exception'] = self.formatException(record.exc_info)
        return json.dumps(log_dict)


def _env_level(default_level: int) -> int:
    name = os.getenv('RBPET_LOG_LEVEL', '').strip().upper()
    if not name:
        return default_level
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else default_level


def setup_logging(default_level: int = logging.INFO) -> None:
    """Configure the root logger according to environment settings.

    The configuration is applied only once; a second call (or a host
    application that already installed handlers) leaves it untouched.

    Parameters
    ----------
    default_level : int, optional
        Logging level used when ``RBPET_LOG_LEVEL`` is unset.  Defaults
        to ``logging.INFO``.
    """
    root = logging.getLogger()
    if root.handlers:
        return
    handler = logging.StreamHandler()
    if os.getenv('RBPET_LOG_JSON', '').lower() in {'1', 'true', 'yes'}:
        formatter: logging.Formatter = JsonFormatter()
    else:
        formatter = logging.Formatter(
            fmt='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
            datefmt='%Y-%m-%dT%H:%M:%SZ',
        )
    formatter.converter = time.gmtime
    handler.setFormatter(formatter)
    root.addHandler(handler)
    root.setLevel(_env_level(default_level))


def get_logger(name: str) -> logging.Logger:
    """Retrieve a named logger after ensuring logging is configured."""
    setup_logging()
    return logging.getLogger(name)


@contextmanager
def log_elapsed(logger: logging.Logger, what: str) -> Iterator[None]:
    """Log the start and the wall-clock duration of a block at INFO."""
    logger.info('%s: started', what)
    t0 = time.perf_counter()
    yield
    logger.info('%s: finished in %.2f s', what, time.perf_counter() - t0)


__all__ = ['JsonFormatter', 'setup_logging', 'get_logger', 'log_elapsed']
