"""Logging for diffkg commands: one stderr handler, JSON or text lines.

Every record leaving the handler carries the running command. Training code
adds ``epoch`` and ``phase``; per-epoch summaries add a ``losses`` mapping.
"""

from __future__ import annotations

import json
import logging
from datetime import datetime, timezone
from typing import Any

import numpy as np

from diffkg.config import LoggingConfig

RECORD_FIELDS = ("command", "epoch", "phase", "losses")

TEXT_FORMAT = "%(asctime)s %(levelname)s [%(command)s] %(name)s: %(message)s"


class CommandFilter(logging.Filter):
    """Stamp the current command on records that do not name one."""

    def __init__(self, command: str | None = None) -> None:
        super().__init__()
        self.command = command or "-"

    def filter(self, record: logging.LogRecord) -> bool:
        if getattr(record, "command", None) is None:
            record.command = self.command
        return True


def _plain(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return str(value)


class JsonFormatter(logging.Formatter):
    """One JSON object per record; ``ts`` is UTC with millisecond precision."""

    def format(self, record: logging.LogRecord) -> str:
        ts = datetime.fromtimestamp(record.created, tz=timezone.utc)
        payload: dict[str, Any] = {
            "ts": ts.isoformat(timespec="milliseconds").replace("+00:00", "Z"),
            "level": record.levelname,
            "logger": record.name,
            "event": getattr(record, "event", "log"),
            "message": record.getMessage(),
        }
        for key in RECORD_FIELDS:
            value = getattr(record, key, None)
            if value is not None:
                payload[key] = value
        if record.exc_info:
            payload["exception"] = self.formatException(record.exc_info)
        return json.dumps(payload, default=_plain)


def configure_logging(settings: LoggingConfig | None = None, command: str | None = None) -> None:
    """Replace the root handlers with a single stderr handler for *command*."""
    settings = settings or LoggingConfig()
    handler = logging.StreamHandler()
    handler.addFilter(CommandFilter(command))
    if settings.format == "json":
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter(TEXT_FORMAT))
    root = logging.getLogger()
    root.handlers.clear()
    root.addHandler(handler)
    root.setLevel(settings.level)
