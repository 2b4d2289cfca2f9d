"""Small shared helpers: ids, hashing, RFC 3339 timestamps."""

from __future__ import annotations

import hashlib
import uuid
from datetime import datetime, timezone
from typing import Optional

__all__ = ["new_id", "stable_hash", "iso", "parse_iso"]


def new_id() -> str:
    return str(uuid.uuid4())


def stable_hash(*parts: object) -> str:
    """Deterministic hex digest of the given parts (order-sensitive)."""
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


def iso(ts: Optional[float]) -> Optional[str]:
    if ts is None:
        return None
    return datetime.fromtimestamp(ts, tz=timezone.utc).isoformat().replace("+00:00", "Z")


def parse_iso(text: str) -> float:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    return datetime.fromisoformat(text).timestamp()
