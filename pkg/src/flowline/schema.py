"""Structural input-schema subset: properties / required / type / enum / default.

This is the slice of JSON-Schema-style validation needed to vet flow input
documents and to drive form generation. Conditionals, references, and array
item schemas are out of scope.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

__all__ = [
    "InputSchema",
    "SchemaError",
    "Violation",
    "ValidationResult",
    "parse_schema",
    "validate_input",
]

TYPES = ("string", "integer", "number", "boolean", "object", "array")

_SCHEMA_KEYS = {"type", "properties", "required", "enum", "default", "title", "description"}


class SchemaError(ValueError):
    """Raised for a malformed schema document."""


@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass
class ValidationResult:
    ok: bool
    violations: list[Violation]
    value: Any


@dataclass(frozen=True)
class InputSchema:
    """A validated schema document. ``document`` is the raw (checked) tree."""

    document: dict = field(default_factory=dict)

    @property
    def properties(self) -> dict:
        return self.document.get("properties", {})

    @property
    def required(self) -> list:
        return self.document.get("required", [])


def parse_schema(document: Any) -> InputSchema:
    if document is None:
        document = {}
    _check_schema(document, "$")
    return InputSchema(document)


def _check_schema(node: Any, where: str) -> None:
    if not isinstance(node, dict):
        raise SchemaError(f"{where}: schema must be an object")
    unknown = set(node) - _SCHEMA_KEYS
    if unknown:
        raise SchemaError(f"{where}: unknown schema keyword(s) {sorted(unknown)}")
    typ = node.get("type")
    if typ is not None and typ not in TYPES:
        raise SchemaError(f"{where}: unknown type {typ!r}")
    props = node.get("properties", {})
    if not isinstance(props, dict):
        raise SchemaError(f"{where}: properties must be an object")
    for name, sub in props.items():
        _check_schema(sub, f"{where}.{name}")
    required = node.get("required", [])
    if not isinstance(required, list) or not all(isinstance(r, str) for r in required):
        raise SchemaError(f"{where}: required must be a list of names")
    missing = [r for r in required if r not in props]
    if missing:
        raise SchemaError(f"{where}: required name(s) {missing} not in properties")
    enum = node.get("enum")
    if enum is not None and (not isinstance(enum, list) or not enum):
        raise SchemaError(f"{where}: enum must be a non-empty list")


def _type_ok(typ: str, value: Any) -> bool:
    if typ == "string":
        return isinstance(value, str)
    if typ == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if typ == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if typ == "boolean":
        return isinstance(value, bool)
    if typ == "object":
        return isinstance(value, dict)
    if typ == "array":
        return isinstance(value, list)
    return True


def validate_input(schema: InputSchema | dict | None, value: Any) -> ValidationResult:
    """Check ``value`` against the schema and apply defaults for absent properties.

    Violations are reported with their context path; they are the return
    value, never an exception. The (possibly augmented) input comes back in
    ``result.value`` and is a fresh document, not an alias of the argument.
    """
    if not isinstance(schema, InputSchema):
        schema = parse_schema(schema)
    violations: list[Violation] = []
    out = _validate(schema.document, copy.deepcopy(value), "$", violations)
    return ValidationResult(ok=not violations, violations=violations, value=out)


def _validate(node: dict, value: Any, where: str, violations: list[Violation]) -> Any:
    typ = node.get("type")
    if typ is not None and not _type_ok(typ, value):
        violations.append(Violation(where, f"expected {typ}, got {_type_name(value)}"))
        return value
    enum = node.get("enum")
    if enum is not None and value not in enum:
        violations.append(Violation(where, f"value {value!r} not one of {enum}"))
        return value
    props = node.get("properties")
    if props and isinstance(value, dict):
        required = set(node.get("required", []))
        for name, sub in props.items():
            if name in value:
                value[name] = _validate(sub, value[name], f"{where}.{name}", violations)
            elif name in required:
                violations.append(Violation(f"{where}.{name}", "required property is missing"))
            elif "default" in sub:
                value[name] = copy.deepcopy(sub["default"])
            elif sub.get("type") == "object" and _has_defaults(sub):
                # A nested object whose own properties carry defaults is
                # materialized so those defaults land.
                value[name] = _validate(sub, {}, f"{where}.{name}", violations)
    return value


def _has_defaults(node: dict) -> bool:
    required = set(node.get("required", []))
    for name, sub in node.get("properties", {}).items():
        if name in required:
            return False
        if "default" in sub or (sub.get("type") == "object" and _has_defaults(sub)):
            return True
    return False


def _type_name(value: Any) -> str:
    if value is None:
        return "null"
    if isinstance(value, bool):
        return "boolean"
    if isinstance(value, int):
        return "integer"
    if isinstance(value, float):
        return "number"
    if isinstance(value, str):
        return "string"
    if isinstance(value, list):
        return "array"
    if isinstance(value, dict):
        return "object"
    return type(value).__name__
