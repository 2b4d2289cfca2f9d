"""Declarative flow definitions: parsing, validation, and state semantics.

A flow document is a JSON object with a ``StartAt`` state name and a
``States`` map. Five state types exist: Action, Choice, Pass, Fail, and
Wait. Parameter templates, result paths, and choice variables all use the
context path language from :mod:`flowline.paths`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Optional

from .paths import ABSENT, ContextPath, PathSyntaxError, eval_path, parse_path

__all__ = [
    "FlowDefinition",
    "StateDefinition",
    "CatchRule",
    "ChoiceRule",
    "FlowValidationError",
    "FlowIssue",
    "PathNotFound",
    "NoMatchingChoice",
    "parse_flow",
    "render_flow",
    "eval_parameters",
    "eval_choice",
    "rewrite_definition",
    "MAX_STATES",
    "MAX_DOCUMENT_BYTES",
]

STATE_TYPES = ("Action", "Choice", "Pass", "Fail", "Wait")

MAX_STATES = 1000
MAX_DOCUMENT_BYTES = 1 << 20

CHOICE_OPERATORS = (
    "StringEquals",
    "NumericEquals",
    "NumericGreaterThan",
    "NumericLessThan",
    "BooleanEquals",
    "IsPresent",
)

# Fields accepted per state type; anything else is rejected at parse time.
_FIELDS = {
    "Action": {
        "Type", "Comment", "ActionUrl", "Parameters", "ResultPath", "WaitTime",
        "RunAs", "ExceptionOnActionFailure", "Catch", "Next", "End",
    },
    "Choice": {"Type", "Comment", "Choices", "Default"},
    "Pass": {"Type", "Comment", "Result", "ResultPath", "Next", "End"},
    "Fail": {"Type", "Comment", "Error", "Cause"},
    "Wait": {"Type", "Comment", "Seconds", "Timestamp", "Next", "End"},
}


@dataclass(frozen=True)
class FlowIssue:
    code: str
    state: Optional[str]
    message: str

    def __str__(self) -> str:
        loc = f"state {self.state!r}: " if self.state else ""
        return f"{self.code}: {loc}{self.message}"


class FlowValidationError(ValueError):
    """Carries every validation issue found in a flow document."""

    def __init__(self, issues: list[FlowIssue]):
        self.issues = issues
        super().__init__("; ".join(str(i) for i in issues))


class PathNotFound(KeyError):
    """A '.$' parameter referenced a path absent from the context."""

    def __init__(self, key: str, path: str):
        self.key = key
        self.path = path
        super().__init__(f"parameter {key!r}: nothing at {path!r}")


class NoMatchingChoice(RuntimeError):
    """No choice rule matched and the state has no Default."""


@dataclass(frozen=True)
class CatchRule:
    error_equals: tuple[str, ...]
    result_path: Optional[ContextPath]
    next: str


@dataclass(frozen=True)
class ChoiceRule:
    """One comparison or boolean combinator. Top-level rules carry ``next``."""

    operator: str
    variable: Optional[ContextPath] = None
    value: Any = None
    terms: tuple["ChoiceRule", ...] = ()
    next: Optional[str] = None


@dataclass(frozen=True)
class StateDefinition:
    name: str
    type: str
    comment: Optional[str] = None
    next: Optional[str] = None
    end: bool = False
    # Action
    action_url: Optional[str] = None
    parameters: Any = None
    result_path: Optional[ContextPath] = None
    wait_time: Optional[int] = None
    run_as: Optional[str] = None
    exception_on_action_failure: bool = False
    catch: tuple[CatchRule, ...] = ()
    # Choice
    choices: tuple[ChoiceRule, ...] = ()
    default: Optional[str] = None
    # Pass
    result: Any = ABSENT
    # Fail
    error: Optional[str] = None
    cause: Optional[str] = None
    # Wait
    seconds: Optional[int] = None
    timestamp: Optional[str] = None

    @property
    def terminal(self) -> bool:
        return self.end or self.type == "Fail"


@dataclass(frozen=True)
class FlowDefinition:
    start_at: str
    states: dict[str, StateDefinition]
    comment: Optional[str] = None
    warnings: tuple[str, ...] = ()
    source: dict = field(default_factory=dict, repr=False)


def parse_flow(document: Any) -> FlowDefinition:
    """Validate a flow document, returning a FlowDefinition or raising
    FlowValidationError with every issue found (state-level locations)."""
    issues: list[FlowIssue] = []
    if not isinstance(document, dict):
        raise FlowValidationError([FlowIssue("NotAnObject", None, "flow definition must be an object")])
    raw = json.dumps(document, sort_keys=True)
    if len(raw.encode("utf-8")) > MAX_DOCUMENT_BYTES:
        issues.append(FlowIssue("DocumentTooLarge", None, f"definition exceeds {MAX_DOCUMENT_BYTES} bytes"))

    start_at = document.get("StartAt")
    if not isinstance(start_at, str) or not start_at:
        issues.append(FlowIssue("MissingStartAt", None, "StartAt is required"))
    states_doc = document.get("States")
    if not isinstance(states_doc, dict) or not states_doc:
        issues.append(FlowIssue("NoStates", None, "States must be a non-empty map"))
        raise FlowValidationError(issues)
    if len(states_doc) > MAX_STATES:
        issues.append(FlowIssue("TooManyStates", None, f"flow exceeds {MAX_STATES} states"))

    states: dict[str, StateDefinition] = {}
    for name, sdoc in states_doc.items():
        parsed = _parse_state(name, sdoc, issues)
        if parsed is not None:
            states[name] = parsed

    known = set(states_doc)
    if isinstance(start_at, str) and start_at and start_at not in known:
        issues.append(FlowIssue("DanglingTransition", None, f"StartAt targets missing state {start_at!r}"))
    for state in states.values():
        for target in _targets(state):
            if target not in known:
                issues.append(FlowIssue(
                    "DanglingTransition", state.name, f"transition targets missing state {target!r}"))
    if states and not any(s.terminal for s in states.values()):
        issues.append(FlowIssue("NoTerminalState", None, "no state has End:true and no Fail state exists"))

    if issues:
        raise FlowValidationError(issues)

    warnings = tuple(
        f"state {name!r} is unreachable from StartAt"
        for name in states_doc
        if name not in _reachable(start_at, states)
    )
    return FlowDefinition(start_at=start_at, states=states, comment=document.get("Comment"),
                          warnings=warnings, source=document)


def _targets(state: StateDefinition) -> list[str]:
    out = []
    if state.next:
        out.append(state.next)
    if state.default:
        out.append(state.default)
    out.extend(rule.next for rule in state.choices if rule.next)
    out.extend(rule.next for rule in state.catch)
    return out


def _reachable(start: str, states: dict[str, StateDefinition]) -> set[str]:
    seen: set[str] = set()
    stack = [start]
    while stack:
        name = stack.pop()
        if name in seen or name not in states:
            continue
        seen.add(name)
        stack.extend(_targets(states[name]))
    return seen


def _parse_state(name: str, doc: Any, issues: list[FlowIssue]) -> Optional[StateDefinition]:
    if not isinstance(doc, dict):
        issues.append(FlowIssue("BadState", name, "state definition must be an object"))
        return None
    typ = doc.get("Type")
    if typ not in STATE_TYPES:
        issues.append(FlowIssue("UnknownStateType", name, f"Type must be one of {STATE_TYPES}, got {typ!r}"))
        return None
    foreign = set(doc) - _FIELDS[typ]
    if foreign:
        issues.append(FlowIssue("ForeignField", name, f"field(s) {sorted(foreign)} not allowed on {typ}"))
        return None

    nxt = doc.get("Next")
    end = doc.get("End", False)
    if typ in ("Action", "Pass", "Wait"):
        if end not in (True, False):
            issues.append(FlowIssue("BadState", name, "End must be boolean"))
            return None
        if bool(nxt) == bool(end):
            issues.append(FlowIssue("BadState", name, "exactly one of Next or End:true is required"))
            return None
        if nxt is not None and not isinstance(nxt, str):
            issues.append(FlowIssue("BadState", name, "Next must be a state name"))
            return None

    def path_or_issue(key: str) -> Optional[ContextPath]:
        text = doc.get(key)
        if text is None:
            return None
        try:
            return parse_path(text)
        except PathSyntaxError as exc:
            issues.append(FlowIssue("BadPath", name, f"{key}: {exc}"))
            return None

    if typ == "Action":
        url = doc.get("ActionUrl")
        if not isinstance(url, str) or "://" not in url:
            issues.append(FlowIssue("BadState", name, "ActionUrl must be an absolute URL"))
            return None
        wait_time = doc.get("WaitTime")
        if wait_time is not None and (not isinstance(wait_time, int) or isinstance(wait_time, bool) or wait_time <= 0):
            issues.append(FlowIssue("BadState", name, "WaitTime must be a positive integer of seconds"))
            return None
        catch = _parse_catch(name, doc.get("Catch"), issues)
        if catch is None:
            return None
        return StateDefinition(
            name=name, type=typ, comment=doc.get("Comment"), next=nxt, end=bool(end),
            action_url=url, parameters=doc.get("Parameters"),
            result_path=path_or_issue("ResultPath"), wait_time=wait_time,
            run_as=doc.get("RunAs"),
            exception_on_action_failure=bool(doc.get("ExceptionOnActionFailure", False)),
            catch=catch,
        )
    if typ == "Choice":
        rules = _parse_choices(name, doc.get("Choices", []), issues)
        default = doc.get("Default")
        if rules is None:
            return None
        return StateDefinition(name=name, type=typ, comment=doc.get("Comment"),
                               choices=rules, default=default)
    if typ == "Pass":
        return StateDefinition(
            name=name, type=typ, comment=doc.get("Comment"), next=nxt, end=bool(end),
            result=doc["Result"] if "Result" in doc else ABSENT,
            result_path=path_or_issue("ResultPath"),
        )
    if typ == "Fail":
        return StateDefinition(name=name, type=typ, comment=doc.get("Comment"),
                               error=doc.get("Error"), cause=doc.get("Cause"))
    # Wait
    seconds = doc.get("Seconds")
    timestamp = doc.get("Timestamp")
    if (seconds is None) == (timestamp is None):
        issues.append(FlowIssue("BadState", name, "Wait needs exactly one of Seconds or Timestamp"))
        return None
    if seconds is not None and (not isinstance(seconds, int) or isinstance(seconds, bool) or seconds <= 0):
        issues.append(FlowIssue("BadState", name, "Seconds must be a positive integer"))
        return None
    return StateDefinition(name=name, type=typ, comment=doc.get("Comment"), next=nxt,
                           end=bool(end), seconds=seconds, timestamp=timestamp)


def _parse_catch(state: str, doc: Any, issues: list[FlowIssue]) -> Optional[tuple[CatchRule, ...]]:
    if doc is None:
        return ()
    if not isinstance(doc, list):
        issues.append(FlowIssue("BadCatch", state, "Catch must be a list"))
        return None
    rules = []
    for i, rdoc in enumerate(doc):
        errors = rdoc.get("ErrorEquals") if isinstance(rdoc, dict) else None
        if not isinstance(errors, list) or not errors or not all(isinstance(e, str) for e in errors):
            issues.append(FlowIssue("BadCatch", state, f"Catch[{i}].ErrorEquals must be a non-empty name list"))
            return None
        nxt = rdoc.get("Next")
        if not isinstance(nxt, str):
            issues.append(FlowIssue("BadCatch", state, f"Catch[{i}].Next must be a state name"))
            return None
        rpath = None
        if "ResultPath" in rdoc:
            try:
                rpath = parse_path(rdoc["ResultPath"])
            except PathSyntaxError as exc:
                issues.append(FlowIssue("BadPath", state, f"Catch[{i}].ResultPath: {exc}"))
                return None
        rules.append(CatchRule(error_equals=tuple(errors), result_path=rpath, next=nxt))
    return tuple(rules)


def _parse_choices(state: str, doc: Any, issues: list[FlowIssue],
                   top: bool = True) -> Optional[tuple[ChoiceRule, ...]]:
    if not isinstance(doc, list):
        issues.append(FlowIssue("BadChoice", state, "Choices must be a list"))
        return None
    rules = []
    for i, rdoc in enumerate(doc):
        rule = _parse_choice_rule(state, rdoc, issues, top=top, where=f"Choices[{i}]")
        if rule is None:
            return None
        rules.append(rule)
    return tuple(rules)


def _parse_choice_rule(state: str, doc: Any, issues: list[FlowIssue], top: bool,
                       where: str) -> Optional[ChoiceRule]:
    if not isinstance(doc, dict):
        issues.append(FlowIssue("BadChoice", state, f"{where}: rule must be an object"))
        return None
    nxt = doc.get("Next")
    if top and not isinstance(nxt, str):
        issues.append(FlowIssue("BadChoice", state, f"{where}: top-level rule needs Next"))
        return None
    if not top and nxt is not None:
        issues.append(FlowIssue("BadChoice", state, f"{where}: nested rule cannot carry Next"))
        return None

    combinators = [k for k in ("And", "Or", "Not") if k in doc]
    comparisons = [k for k in CHOICE_OPERATORS if k in doc]
    if len(combinators) + len(comparisons) != 1:
        issues.append(FlowIssue("BadChoice", state, f"{where}: exactly one operator required"))
        return None

    if combinators:
        op = combinators[0]
        if op == "Not":
            term = _parse_choice_rule(state, doc[op], issues, top=False, where=f"{where}.Not")
            if term is None:
                return None
            terms = (term,)
        else:
            sub = _parse_choices(state, doc[op], issues, top=False)
            if sub is None:
                return None
            if not sub:
                issues.append(FlowIssue("BadChoice", state, f"{where}.{op}: needs at least one term"))
                return None
            terms = sub
        return ChoiceRule(operator=op, terms=terms, next=nxt)

    op = comparisons[0]
    var = doc.get("Variable")
    try:
        variable = parse_path(var)
    except PathSyntaxError as exc:
        issues.append(FlowIssue("BadChoice", state, f"{where}.Variable: {exc}"))
        return None
    return ChoiceRule(operator=op, variable=variable, value=doc[op], next=nxt)


def render_flow(flow: FlowDefinition) -> dict:
    """Regenerate the document form of a parsed flow (used for round-trips
    and for persisting the deployed, rewritten definition)."""
    states: dict[str, Any] = {}
    for name, s in flow.states.items():
        states[name] = _render_state(s)
    doc: dict[str, Any] = {"StartAt": flow.start_at, "States": states}
    if flow.comment is not None:
        doc["Comment"] = flow.comment
    return doc


def _render_state(s: StateDefinition) -> dict:
    doc: dict[str, Any] = {"Type": s.type}
    if s.comment is not None:
        doc["Comment"] = s.comment
    if s.type == "Action":
        doc["ActionUrl"] = s.action_url
        if s.parameters is not None:
            doc["Parameters"] = s.parameters
        if s.result_path is not None:
            doc["ResultPath"] = s.result_path.raw
        if s.wait_time is not None:
            doc["WaitTime"] = s.wait_time
        if s.run_as is not None:
            doc["RunAs"] = s.run_as
        if s.exception_on_action_failure:
            doc["ExceptionOnActionFailure"] = True
        if s.catch:
            doc["Catch"] = [
                {
                    "ErrorEquals": list(rule.error_equals),
                    **({"ResultPath": rule.result_path.raw} if rule.result_path else {}),
                    "Next": rule.next,
                }
                for rule in s.catch
            ]
    elif s.type == "Choice":
        doc["Choices"] = [_render_choice(rule) for rule in s.choices]
        if s.default is not None:
            doc["Default"] = s.default
    elif s.type == "Pass":
        if s.result is not ABSENT:
            doc["Result"] = s.result
        if s.result_path is not None:
            doc["ResultPath"] = s.result_path.raw
    elif s.type == "Fail":
        if s.error is not None:
            doc["Error"] = s.error
        if s.cause is not None:
            doc["Cause"] = s.cause
    else:  # Wait
        if s.seconds is not None:
            doc["Seconds"] = s.seconds
        if s.timestamp is not None:
            doc["Timestamp"] = s.timestamp
    if s.next is not None:
        doc["Next"] = s.next
    if s.end:
        doc["End"] = True
    return doc


def _render_choice(rule: ChoiceRule) -> dict:
    if rule.operator in ("And", "Or"):
        doc: dict[str, Any] = {rule.operator: [_render_choice(t) for t in rule.terms]}
    elif rule.operator == "Not":
        doc = {"Not": _render_choice(rule.terms[0])}
    else:
        doc = {"Variable": rule.variable.raw, rule.operator: rule.value}
    if rule.next is not None:
        doc["Next"] = rule.next
    return doc


# --- run-time semantics -----------------------------------------------------

def eval_parameters(template: Any, context: Any) -> Any:
    """Resolve a Parameters template against a context document.

    Map keys ending in ``.$`` name a path whose value replaces the entry
    (key loses the suffix); everything else is copied verbatim, recursively.
    Inputs are never mutated and the output carries no ``.$`` keys.
    """
    if isinstance(template, dict):
        out = {}
        for key, val in template.items():
            if isinstance(key, str) and key.endswith(".$"):
                resolved = eval_path(context, parse_path(val))
                if resolved is ABSENT:
                    raise PathNotFound(key, val)
                out[key[:-2]] = resolved
            else:
                out[key] = eval_parameters(val, context)
        return out
    if isinstance(template, list):
        return [eval_parameters(item, context) for item in template]
    return template


def eval_choice(state: StateDefinition, context: Any) -> str:
    """Return the Next of the first matching rule, else Default."""
    for rule in state.choices:
        if _rule_matches(rule, context):
            return rule.next  # type: ignore[return-value]
    if state.default is not None:
        return state.default
    raise NoMatchingChoice(f"state {state.name!r}: no rule matched and no Default")


def _rule_matches(rule: ChoiceRule, context: Any) -> bool:
    op = rule.operator
    if op == "And":
        return all(_rule_matches(t, context) for t in rule.terms)
    if op == "Or":
        return any(_rule_matches(t, context) for t in rule.terms)
    if op == "Not":
        return not _rule_matches(rule.terms[0], context)

    value = eval_path(context, rule.variable)
    if op == "IsPresent":
        return (value is not ABSENT) == bool(rule.value)
    if value is ABSENT:
        # An absent variable never matches a comparison; the rule falls through.
        return False
    if op == "StringEquals":
        return isinstance(value, str) and value == rule.value
    if op == "BooleanEquals":
        return isinstance(value, bool) and value == rule.value
    if op == "NumericEquals":
        return _is_number(value) and value == rule.value
    if op == "NumericGreaterThan":
        return _is_number(value) and _is_number(rule.value) and value > rule.value
    if op == "NumericLessThan":
        return _is_number(value) and _is_number(rule.value) and value < rule.value
    raise AssertionError(f"unhandled operator {op}")


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


# --- deployment rewriting ---------------------------------------------------

def rewrite_definition(document: dict, prefix: str = "UserState") -> dict:
    """Re-anchor every user path reference beneath a context subtree.

    ``$.x`` becomes ``$.<prefix>.x`` and ``$`` becomes ``$.<prefix>``, in
    Parameters values for ``.$`` keys, ResultPath, Catch ResultPath, and
    Choice Variables. The result is a new document; the input is untouched.
    """
    parse_flow(document)

    def shift(text: str) -> str:
        path = parse_path(text)
        return f"$.{prefix}" + path.raw[1:]

    def shift_params(node: Any) -> Any:
        if isinstance(node, dict):
            return {
                key: shift(val) if isinstance(key, str) and key.endswith(".$") else shift_params(val)
                for key, val in node.items()
            }
        if isinstance(node, list):
            return [shift_params(item) for item in node]
        return node

    def shift_choice(rdoc: dict) -> dict:
        out = dict(rdoc)
        if "Variable" in out:
            out["Variable"] = shift(out["Variable"])
        for comb in ("And", "Or"):
            if comb in out:
                out[comb] = [shift_choice(t) for t in out[comb]]
        if "Not" in out:
            out["Not"] = shift_choice(out["Not"])
        return out

    doc = json.loads(json.dumps(document))
    for sdoc in doc["States"].values():
        if "Parameters" in sdoc:
            sdoc["Parameters"] = shift_params(sdoc["Parameters"])
        if "ResultPath" in sdoc:
            sdoc["ResultPath"] = shift(sdoc["ResultPath"])
        if "Catch" in sdoc:
            sdoc["Catch"] = [
                {**r, **({"ResultPath": shift(r["ResultPath"])} if "ResultPath" in r else {})}
                for r in sdoc["Catch"]
            ]
        if "Choices" in sdoc:
            sdoc["Choices"] = [shift_choice(r) for r in sdoc["Choices"]]
    parse_flow(doc)
    return doc
