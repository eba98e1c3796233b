import json
import logging
from datetime import datetime
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from config import Config

logger = logging.getLogger(__name__)


def format_timestamp() -> str:
    """Format current timestamp for logging"""
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def create_error_message(error: Exception, context: str = "") -> str:
    """Create formatted error message"""
    timestamp = format_timestamp()
    context_str = f" ({context})" if context else ""
    return f"[{timestamp}] Error{context_str}: {str(error)}"


def format_number(value: float) -> str:
    """Format a number with the configured significant digits"""
    return Config.float_format() % value


def parse_range(text: str) -> Tuple[float, float, int]:
    """Parse a lo:hi:steps range flag"""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"Range '{text}' must look like lo:hi:steps (e.g. -6:2:64)")
    lo, hi, steps = float(parts[0]), float(parts[1]), int(parts[2])
    if not hi > lo:
        raise ValueError(f"Range '{text}' needs hi > lo")
    if steps < 2:
        raise ValueError(f"Range '{text}' needs at least 2 steps")
    return lo, hi, steps


def to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into plain JSON types"""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [to_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return float(format_number(value)) if np.isfinite(value) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def dump_json(payload: Dict[str, Any]) -> str:
    """Render a report as an indented JSON document"""
    return json.dumps(to_jsonable(payload), indent=2)


def total_variation(p: Sequence[float], q: Sequence[float]) -> float:
    """Total-variation distance between two probability vectors"""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    size = max(p.size, q.size)
    p = np.pad(p, (0, size - p.size))
    q = np.pad(q, (0, size - q.size))
    return 0.5 * float(np.abs(p - q).sum())
