from __future__ import annotations

import contextvars
import json
import logging
import sys
import time
import uuid
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any, cast

import numpy as np

_run_var: contextvars.ContextVar[str | None] = contextvars.ContextVar(
    "rider_run_id", default=None
)


def _now_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def new_run_id() -> str:
    return str(uuid.uuid4())


@contextmanager
def run_context(run_id: str | None = None) -> Iterator[str]:
    """Tag every log record emitted inside the block with a run id."""
    rid = run_id or new_run_id()
    token = _run_var.set(rid)
    try:
        yield rid
    finally:
        _run_var.reset(token)


def get_run_id() -> str | None:
    return cast(str | None, _run_var.get())


# attributes every LogRecord carries; anything else came in through `extra`
_RESERVED = frozenset(vars(logging.makeLogRecord({}))) | {"message", "taskName"}


def jsonable(v: Any) -> Any:
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {str(k): jsonable(x) for k, x in v.items()}
    if isinstance(v, list | tuple):
        return [jsonable(x) for x in v]
    return v


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:  # noqa: D401
        payload: dict[str, Any] = {
            "time": _now_iso(),
            "level": record.levelname,
            "logger": record.name,
        }
        if record.args and isinstance(record.msg, str):
            msg = record.msg % record.args
        else:
            msg = record.msg
        if isinstance(msg, dict):
            payload.update(jsonable(msg))
        else:
            payload["message"] = str(msg)

        rid = get_run_id()
        if rid:
            payload["run_id"] = rid

        for k, v in record.__dict__.items():
            if k in _RESERVED or k in payload:
                continue
            try:
                json.dumps(jsonable(v))
                payload[k] = jsonable(v)
            except (TypeError, ValueError):
                payload[k] = str(v)
        return json.dumps(payload, ensure_ascii=False)


_LOGGER_NAME = "rider"


class _RunIdFilter(logging.Filter):
    def filter(self, record: logging.LogRecord) -> bool:  # pragma: no cover - trivial
        record.run_id = get_run_id()
        return True


def get_logger() -> logging.Logger:
    logger = logging.getLogger(_LOGGER_NAME)
    # single stderr handler; stdout stays clean for CLI payloads
    if not any(getattr(h, "_rider_stderr", False) for h in logger.handlers):
        handler = logging.StreamHandler(stream=sys.stderr)
        handler.setFormatter(JsonFormatter())
        handler._rider_stderr = True  # type: ignore[attr-defined]
        logger.addHandler(handler)
    if not any(isinstance(f, _RunIdFilter) for f in logger.filters):
        logger.addFilter(_RunIdFilter())
    if logger.level == logging.NOTSET:
        logger.setLevel(logging.INFO)
    # propagate so caplog sees records
    logger.propagate = True
    return logger


@contextmanager
def sidecar_log(path: str | Path) -> Iterator[None]:
    """Mirror the rider logger into a JSON-lines file for the duration of a run."""
    logger = get_logger()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(p, mode="a", encoding="utf-8")
    handler.setFormatter(JsonFormatter())
    logger.addHandler(handler)
    try:
        yield
    finally:
        logger.removeHandler(handler)
        handler.close()


def log_event(
    *,
    event: str,
    details: dict[str, Any] | None = None,
    level: int = logging.INFO,
) -> None:
    """Emit a structured JSON log record: {"event": ..., **details}."""
    logger = get_logger()
    if not logger.isEnabledFor(level):
        return
    payload: dict[str, Any] = {"event": event}
    if details:
        payload.update(jsonable(details))
    logger.log(level, payload)
