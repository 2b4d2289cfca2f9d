"""Predicate and template expressions for triggers.

A small, closed, Python-flavored expression language evaluated against one
event document. Evaluation is total: unknown identifiers resolve to null,
and any comparison involving null is false. There are no side effects, no
user-defined functions, and no loops.

Grammar (see also the CLI's ``trigger grammar`` command)::

    expr       := or
    or         := and ("or" and)*
    and        := unary ("and" unary)*
    unary      := "not" unary | comparison
    comparison := postfix (("=="|"!="|"<"|"<="|">"|">=") postfix)?
    postfix    := primary ("." NAME ["(" args ")"] | "[" expr "]")*
    primary    := NUMBER | STRING | true | false | null | NAME
                | "len" "(" expr ")" | "(" expr ")"

String methods: ``endswith``, ``startswith``, ``contains``. The reserved
identifier ``event`` names the whole event document unless the event itself
carries an ``event`` property.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Any

__all__ = ["Expression", "BadExpression", "parse_expression", "eval_predicate", "render_input"]

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<number>\d+\.\d+|\d+)
    | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<string>'(?:\\.|[^'\\])*'|"(?:\\.|[^"\\])*")
    | (?P<op>==|!=|<=|>=|<|>|\(|\)|\[|\]|\.|,)
    """,
    re.VERBOSE,
)

_KEYWORDS = {
    "and": "and", "or": "or", "not": "not",
    "true": True, "True": True, "false": False, "False": False,
    "null": None, "none": None, "None": None,
}

_METHODS = ("endswith", "startswith", "contains")


class BadExpression(ValueError):
    """Parse failure; carries the character position of the problem."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} (at position {position})")


@dataclass(frozen=True)
class _Token:
    kind: str
    value: Any
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise BadExpression(f"unexpected character {text[pos]!r}", pos)
        if m.lastgroup == "number":
            raw = m.group()
            tokens.append(_Token("literal", float(raw) if "." in raw else int(raw), pos))
        elif m.lastgroup == "name":
            name = m.group()
            if name in ("and", "or", "not"):
                tokens.append(_Token("keyword", name, pos))
            elif name in _KEYWORDS:
                tokens.append(_Token("literal", _KEYWORDS[name], pos))
            else:
                tokens.append(_Token("name", name, pos))
        elif m.lastgroup == "string":
            raw = m.group()
            body = raw[1:-1]
            tokens.append(_Token("literal", re.sub(r"\\(.)", r"\1", body), pos))
        elif m.lastgroup == "op":
            tokens.append(_Token("op", m.group(), pos))
        pos = m.end()
    tokens.append(_Token("end", None, pos))
    return tokens


# AST nodes are plain tuples: ("lit", v) ("var", name) ("attr", node, name)
# ("index", node, idx) ("call", node, method, args) ("len", node)
# ("cmp", op, l, r) ("and"/"or", terms) ("not", node)


@dataclass(frozen=True)
class Expression:
    text: str
    node: tuple

    def evaluate(self, event: Any) -> Any:
        return _eval(self.node, event)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_op(self, op: str) -> None:
        tok = self.next()
        if tok.kind != "op" or tok.value != op:
            raise BadExpression(f"expected {op!r}", tok.pos)

    def parse(self) -> tuple:
        node = self.or_expr()
        tok = self.peek()
        if tok.kind != "end":
            raise BadExpression(f"unexpected trailing input {tok.value!r}", tok.pos)
        return node

    def or_expr(self) -> tuple:
        node = self.and_expr()
        terms = [node]
        while self.peek().kind == "keyword" and self.peek().value == "or":
            self.next()
            terms.append(self.and_expr())
        return terms[0] if len(terms) == 1 else ("or", tuple(terms))

    def and_expr(self) -> tuple:
        terms = [self.unary()]
        while self.peek().kind == "keyword" and self.peek().value == "and":
            self.next()
            terms.append(self.unary())
        return terms[0] if len(terms) == 1 else ("and", tuple(terms))

    def unary(self) -> tuple:
        tok = self.peek()
        if tok.kind == "keyword" and tok.value == "not":
            self.next()
            return ("not", self.unary())
        return self.comparison()

    def comparison(self) -> tuple:
        left = self.postfix()
        tok = self.peek()
        if tok.kind == "op" and tok.value in ("==", "!=", "<", "<=", ">", ">="):
            self.next()
            right = self.postfix()
            return ("cmp", tok.value, left, right)
        return left

    def postfix(self) -> tuple:
        node = self.primary()
        while True:
            tok = self.peek()
            if tok.kind == "op" and tok.value == ".":
                self.next()
                name_tok = self.next()
                if name_tok.kind != "name":
                    raise BadExpression("expected a property or method name after '.'", name_tok.pos)
                if self.peek().kind == "op" and self.peek().value == "(":
                    if name_tok.value not in _METHODS:
                        raise BadExpression(f"unknown method {name_tok.value!r}", name_tok.pos)
                    self.next()
                    args = self.args()
                    node = ("call", node, name_tok.value, tuple(args))
                else:
                    node = ("attr", node, name_tok.value)
            elif tok.kind == "op" and tok.value == "[":
                self.next()
                idx = self.or_expr()
                self.expect_op("]")
                node = ("index", node, idx)
            else:
                return node

    def args(self) -> list:
        out = []
        if self.peek().kind == "op" and self.peek().value == ")":
            self.next()
            return out
        out.append(self.or_expr())
        while self.peek().kind == "op" and self.peek().value == ",":
            self.next()
            out.append(self.or_expr())
        self.expect_op(")")
        return out

    def primary(self) -> tuple:
        tok = self.next()
        if tok.kind == "literal":
            return ("lit", tok.value)
        if tok.kind == "name":
            if tok.value == "len" and self.peek().kind == "op" and self.peek().value == "(":
                self.next()
                inner = self.or_expr()
                self.expect_op(")")
                return ("len", inner)
            return ("var", tok.value)
        if tok.kind == "op" and tok.value == "(":
            inner = self.or_expr()
            self.expect_op(")")
            return inner
        raise BadExpression(f"unexpected {tok.value!r}", tok.pos)


def parse_expression(text: str) -> Expression:
    if not isinstance(text, str) or not text.strip():
        raise BadExpression("empty expression", 0)
    return Expression(text=text, node=_Parser(text).parse())


def _truthy(value: Any) -> bool:
    return bool(value)


def _eval(node: tuple, event: Any) -> Any:
    kind = node[0]
    if kind == "lit":
        return node[1]
    if kind == "var":
        name = node[1]
        if isinstance(event, dict) and name in event:
            return event[name]
        if name == "event":
            return event
        return None
    if kind == "attr":
        base = _eval(node[1], event)
        if isinstance(base, dict):
            return base.get(node[2])
        return None
    if kind == "index":
        base = _eval(node[1], event)
        idx = _eval(node[2], event)
        if isinstance(base, list) and isinstance(idx, int) and not isinstance(idx, bool):
            return base[idx] if -len(base) <= idx < len(base) else None
        if isinstance(base, dict) and isinstance(idx, str):
            return base.get(idx)
        return None
    if kind == "call":
        base = _eval(node[1], event)
        args = [_eval(a, event) for a in node[3]]
        if not isinstance(base, str) or len(args) != 1 or not isinstance(args[0], str):
            return None
        method = node[2]
        if method == "endswith":
            return base.endswith(args[0])
        if method == "startswith":
            return base.startswith(args[0])
        return args[0] in base  # contains
    if kind == "len":
        value = _eval(node[1], event)
        if isinstance(value, (str, list, dict)):
            return len(value)
        return None
    if kind == "cmp":
        op, left, right = node[1], _eval(node[2], event), _eval(node[3], event)
        if left is None or right is None:
            return False
        if op == "==":
            return _eq(left, right)
        if op == "!=":
            return not _eq(left, right)
        if not _orderable(left, right):
            return False
        if op == "<":
            return left < right
        if op == "<=":
            return left <= right
        if op == ">":
            return left > right
        return left >= right
    if kind == "and":
        return all(_truthy(_eval(t, event)) for t in node[1])
    if kind == "or":
        return any(_truthy(_eval(t, event)) for t in node[1])
    if kind == "not":
        return not _truthy(_eval(node[1], event))
    raise AssertionError(f"unhandled node {kind}")


def _eq(left: Any, right: Any) -> bool:
    if isinstance(left, bool) != isinstance(right, bool):
        return False
    return left == right


def _orderable(left: Any, right: Any) -> bool:
    if isinstance(left, bool) or isinstance(right, bool):
        return False
    if isinstance(left, (int, float)) and isinstance(right, (int, float)):
        return True
    return isinstance(left, str) and isinstance(right, str)


def eval_predicate(predicate: Expression, event: Any) -> bool:
    """Deterministic boolean verdict for an event; never raises."""
    return _truthy(predicate.evaluate(event))


def render_input(template: dict[str, Expression], event: Any) -> dict:
    """Evaluate every template parameter against the event document."""
    return {name: expr.evaluate(event) for name, expr in template.items()}
