"""Context path language: dotted member access plus non-negative list indices.

Paths look like ``$``, ``$.a.b`` or ``$.items[0].name`` and are evaluated
against a JSON-style document (nested dicts/lists/scalars). Wildcards,
filters, and recursive descent are deliberately unsupported.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any, Union

__all__ = [
    "ABSENT",
    "ContextPath",
    "PathSyntaxError",
    "PathThroughScalar",
    "parse_path",
    "eval_path",
    "apply_result_path",
]


class _Absent:
    """Singleton marker for 'no value at this path' (distinct from None)."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "ABSENT"

    def __bool__(self) -> bool:
        return False


ABSENT = _Absent()

Segment = Union[str, int]


class PathSyntaxError(ValueError):
    """Raised for text that is not a valid context path."""


class PathThroughScalar(ValueError):
    """Raised when a write would have to descend through a scalar value."""

    def __init__(self, path: "ContextPath", segment: Segment):
        self.path = path
        self.segment = segment
        super().__init__(f"cannot descend through scalar at segment {segment!r} of {path.raw!r}")


# One member access: ".name" optionally followed by "[0]"-style indices.
_MEMBER_RE = re.compile(r"\.([^.\[\]]+)((?:\[\d+\])*)")
_INDEX_RE = re.compile(r"\[(\d+)\]")


@dataclass(frozen=True)
class ContextPath:
    raw: str
    segments: tuple[Segment, ...]

    def __str__(self) -> str:
        return self.raw

    def render(self) -> str:
        """Regenerate the textual form from the parsed segments."""
        out = ["$"]
        for seg in self.segments:
            if isinstance(seg, int):
                out.append(f"[{seg}]")
            else:
                out.append(f".{seg}")
        return "".join(out)

    def child(self, segment: Segment) -> "ContextPath":
        segs = self.segments + (segment,)
        suffix = f"[{segment}]" if isinstance(segment, int) else f".{segment}"
        return ContextPath(self.raw + suffix, segs)


def parse_path(text: Any) -> ContextPath:
    """Parse a path string, rejecting anything that does not start with ``$``."""
    if not isinstance(text, str):
        raise PathSyntaxError(f"path must be a string, got {type(text).__name__}")
    if text == "$":
        return ContextPath("$", ())
    if not text.startswith("$."):
        raise PathSyntaxError(f"path must start with '$': {text!r}")
    segments: list[Segment] = []
    pos = 1
    while pos < len(text):
        m = _MEMBER_RE.match(text, pos)
        if m is None:
            raise PathSyntaxError(f"bad path syntax at offset {pos} in {text!r}")
        segments.append(m.group(1))
        for idx in _INDEX_RE.findall(m.group(2)):
            segments.append(int(idx))
        pos = m.end()
    path = ContextPath(text, tuple(segments))
    if path.render() != text:
        raise PathSyntaxError(f"path does not round-trip: {text!r}")
    return path


def _as_path(path: Union[str, ContextPath]) -> ContextPath:
    return path if isinstance(path, ContextPath) else parse_path(path)


def eval_path(context: Any, path: Union[str, ContextPath]) -> Any:
    """Return the value at ``path`` in ``context``, or ABSENT.

    Absence is a value, never an error: missing keys, out-of-range indices,
    and descents through scalars all yield ABSENT.
    """
    node = context
    for seg in _as_path(path).segments:
        if isinstance(seg, int):
            if isinstance(node, list) and 0 <= seg < len(node):
                node = node[seg]
            else:
                return ABSENT
        else:
            if isinstance(node, dict) and seg in node:
                node = node[seg]
            else:
                return ABSENT
    return node


def apply_result_path(context: Any, path: Union[str, ContextPath], value: Any) -> Any:
    """Return a new document with ``value`` stored at ``path``.

    Intermediate maps are created as needed; the rest of the context is
    shared structurally but never mutated. ``$`` replaces the whole document.
    """
    cpath = _as_path(path)
    if not cpath.segments:
        return value
    return _set(context, cpath, cpath.segments, value)


def _set(node: Any, path: ContextPath, segments: tuple[Segment, ...], value: Any) -> Any:
    seg, rest = segments[0], segments[1:]
    if isinstance(seg, int):
        if not isinstance(node, list):
            raise PathThroughScalar(path, seg)
        if not 0 <= seg < len(node):
            raise PathThroughScalar(path, seg)
        out_list = list(node)
        out_list[seg] = value if not rest else _set(node[seg], path, rest, value)
        return out_list
    if node is None or node is ABSENT:
        node = {}
    if not isinstance(node, dict):
        raise PathThroughScalar(path, seg)
    out = dict(node)
    if not rest:
        out[seg] = value
    else:
        out[seg] = _set(node.get(seg), path, rest, value)
    return out
