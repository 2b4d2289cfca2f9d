"""Durable flow-run execution.

Runs advance through their states under a per-run lock, with every state
transition committed (and fsynced) before any externally visible effect
depends on it. Asynchronous actions are watched by polling with an
exponentially backed-off interval. Action dispatch is made idempotent by a
deterministic request id derived from (run, state, attempt), so a crash at
any point can only ever re-issue a request the provider de-duplicates.

The scheduler holds hints, not truth: a worker attending to a run decides
what to do purely from persisted state, which is what makes recovery after
a hard kill the same code path as normal operation.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Any, Callable, Optional

from .actions.protocol import (
    ACTIVE,
    FAILED,
    SUCCEEDED,
    ProviderError,
    ProviderUnavailable,
    SchemaViolation,
    Unauthorized,
    UnknownAction,
)
from .authz import AuthError, AuthService, RunRoles
from .dispatch import Dispatcher
from .flowdef import (
    ABSENT,
    FlowDefinition,
    NoMatchingChoice,
    PathNotFound,
    StateDefinition,
    eval_choice,
    eval_parameters,
    parse_flow,
)
from .paths import PathThroughScalar, apply_result_path
from .sched import DueScheduler
from .schema import InputSchema, validate_input
from .store import Store, canonical_json
from .util import iso, new_id, parse_iso, stable_hash

logger = logging.getLogger(__name__)

__all__ = ["RunEngine", "EngineError", "MissingRoleToken", "AlreadyTerminal", "UnknownRun",
           "RunUnauthorized", "next_poll_interval", "poll_schedule", "USER_STATE", "INTERNAL_KEYS"]

USER_STATE = "UserState"
INTERNAL_KEYS = frozenset({"Internal"})

RUN_ACTIVE = "ACTIVE"
RUN_SUCCEEDED = "SUCCEEDED"
RUN_FAILED = "FAILED"
RUN_CANCELED = "CANCELED"
RUN_INACTIVE = "INACTIVE"
TERMINAL = (RUN_SUCCEEDED, RUN_FAILED, RUN_CANCELED)

ERROR_ACTION_FAILED = "ActionFailedException"
ERROR_TIMEOUT = "ActionTimeout"
ERROR_RUNTIME = "States.Runtime"
CATCH_ALL = "States.ALL"


class EngineError(Exception):
    pass


class UnknownRun(EngineError):
    pass


class RunUnauthorized(EngineError):
    pass


class AlreadyTerminal(EngineError):
    pass


class MissingRoleToken(EngineError):
    def __init__(self, role: str):
        self.role = role
        super().__init__(f"no token supplied for flow role {role!r}")


def next_poll_interval(current: float, maximum: float = 600.0) -> float:
    """Double the polling interval, capped at the configured maximum."""
    return min(2 * current, maximum)


def poll_schedule(duration: float, initial: float = 2.0, maximum: float = 600.0,
                  horizon: int = 100) -> list[float]:
    """Cumulative poll times for an action of the given duration: every poll
    up to and including the one that detects completion."""
    out: list[float] = []
    t, interval = 0.0, initial
    for _ in range(horizon):
        t += interval
        out.append(t)
        if t >= duration:
            break
        interval = next_poll_interval(interval, maximum)
    return out


_DDL = """
CREATE TABLE IF NOT EXISTS runs (
    run_id TEXT PRIMARY KEY,
    flow_id TEXT NOT NULL,
    status TEXT NOT NULL,
    phase TEXT NOT NULL,
    current_state TEXT,
    context TEXT NOT NULL,
    output TEXT,
    creator TEXT NOT NULL,
    creator_token TEXT,
    role_tokens TEXT NOT NULL,
    label TEXT,
    tags TEXT NOT NULL,
    monitor_by TEXT NOT NULL,
    manage_by TEXT NOT NULL,
    request_id TEXT,
    definition TEXT NOT NULL,
    attempts TEXT NOT NULL,
    failures INTEGER NOT NULL DEFAULT 0,
    wake_at REAL,
    inactive_reason TEXT,
    created REAL NOT NULL,
    updated REAL NOT NULL,
    completed REAL,
    release_after REAL NOT NULL
);
CREATE UNIQUE INDEX IF NOT EXISTS runs_dedup
    ON runs (flow_id, creator, request_id) WHERE request_id IS NOT NULL;
CREATE INDEX IF NOT EXISTS runs_by_flow ON runs (flow_id);
CREATE TABLE IF NOT EXISTS run_events (
    run_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    ts REAL NOT NULL,
    kind TEXT NOT NULL,
    state TEXT,
    detail TEXT,
    PRIMARY KEY (run_id, seq)
);
CREATE TABLE IF NOT EXISTS pending_polls (
    run_id TEXT PRIMARY KEY,
    action_id TEXT NOT NULL,
    provider_url TEXT NOT NULL,
    next_poll_at REAL NOT NULL,
    current_interval REAL NOT NULL,
    deadline REAL NOT NULL,
    failures INTEGER NOT NULL DEFAULT 0,
    token TEXT
);
"""


class RunEngine:
    def __init__(self, store: Store, dispatcher: Dispatcher, authz: AuthService, *,
                 workers: int = 8, poll_initial: float = 2.0, poll_max: float = 600.0,
                 wait_time_default: float = 86400.0, scheduler_tick: float = 0.1,
                 provider_retry_budget: int = 5, run_retention: float = 30 * 86400.0,
                 flow_roles_lookup: Optional[Callable[[str], Any]] = None):
        self.store = store
        self.dispatcher = dispatcher
        self.authz = authz
        self.workers = workers
        self.poll_initial = poll_initial
        self.poll_max = poll_max
        self.wait_time_default = wait_time_default
        self.provider_retry_budget = provider_retry_budget
        self.run_retention = run_retention
        self.flow_roles_lookup = flow_roles_lookup or (lambda flow_id: None)
        self._sched = DueScheduler(scheduler_tick)
        self._threads: list[threading.Thread] = []
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._defs: dict[str, FlowDefinition] = {}
        self._defs_guard = threading.Lock()
        self._scope_cache: dict[str, str] = {}
        self._stopped = threading.Event()
        store.init_schema(_DDL)

    # -- lifecycle --------------------------------------------------------------

    def start(self) -> int:
        self._stopped.clear()
        self._sched.start()
        self._threads = [
            threading.Thread(target=self._work_loop, name=f"engine-{i}", daemon=True)
            for i in range(self.workers)
        ]
        for t in self._threads:
            t.start()
        return self.recover_runs()

    def stop(self) -> None:
        self._stopped.set()
        self._sched.stop()
        for t in self._threads:
            t.join(timeout=5)
        self._threads = []

    def recover_runs(self) -> int:
        """Re-arm every ACTIVE run from durable state; overdue work runs now."""
        count = 0
        now = time.time()
        for row in self.store.query("SELECT run_id, wake_at, phase FROM runs WHERE status=?", (RUN_ACTIVE,)):
            run_id = row["run_id"]
            poll = self.store.query_one("SELECT next_poll_at FROM pending_polls WHERE run_id=?", (run_id,))
            if poll is not None:
                due = min(poll["next_poll_at"], now)  # overdue polls execute immediately
            elif row["phase"] == "waiting" and row["wake_at"] is not None:
                due = row["wake_at"]
            else:
                due = now
            self._sched.schedule(run_id, due)
            count += 1
        return count

    def _work_loop(self) -> None:
        while not self._stopped.is_set():
            run_id = self._sched.pop_due()
            if run_id is None:
                return
            try:
                self._attend(run_id)
            except Exception:
                logger.exception("unexpected engine error attending run %s", run_id)
                if not self._stopped.is_set():
                    self._sched.schedule(run_id, time.time() + 1.0)

    def _lock_for(self, run_id: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(run_id)
            if lock is None:
                lock = self._locks[run_id] = threading.Lock()
            return lock

    # -- run lifecycle ------------------------------------------------------------

    def start_run(self, *, flow_id: str, definition: dict, schema: InputSchema,
                  intro: dict, token: Optional[str], input: Any,
                  label: Optional[str] = None, tags: Optional[list] = None,
                  monitor_by: Optional[list] = None, manage_by: Optional[list] = None,
                  role_tokens: Optional[dict] = None, request_id: Optional[str] = None) -> dict:
        """Create and schedule a run. Authorization (Runnable By) is the
        caller's responsibility; input validation and role-token checks
        happen here, before anything is persisted."""
        result = validate_input(schema, input)
        if not result.ok:
            raise SchemaViolation(result.violations)
        flow = self._parse(definition)
        role_tokens = dict(role_tokens or {})
        for state in flow.states.values():
            if state.type == "Action" and state.run_as and state.run_as not in role_tokens:
                raise MissingRoleToken(state.run_as)

        if request_id is not None:
            existing = self.store.query_one(
                "SELECT run_id FROM runs WHERE flow_id=? AND creator=? AND request_id=?",
                (flow_id, intro["sub"], request_id))
            if existing is not None:
                return self.run_doc(existing["run_id"])

        run_id = new_id()
        now = time.time()
        context = {USER_STATE: result.value,
                   "Internal": {"run_id": run_id, "flow_id": flow_id, "creator": intro["sub"]}}
        row = {
            "run_id": run_id, "flow_id": flow_id, "status": RUN_ACTIVE, "phase": "ready",
            "current_state": flow.start_at, "context": canonical_json(context), "output": None,
            "creator": intro["sub"], "creator_token": token,
            "role_tokens": canonical_json(role_tokens), "label": label,
            "tags": canonical_json(list(tags or [])),
            "monitor_by": canonical_json(list(monitor_by or [])),
            "manage_by": canonical_json(list(manage_by or [])),
            "request_id": request_id, "definition": canonical_json(definition),
            "attempts": "{}", "failures": 0, "wake_at": None, "inactive_reason": None,
            "created": now, "updated": now, "completed": None, "release_after": self.run_retention,
        }
        try:
            with self.store.tx() as conn:
                conn.execute(
                    "INSERT INTO runs (run_id, flow_id, status, phase, current_state, context, output,"
                    " creator, creator_token, role_tokens, label, tags, monitor_by, manage_by,"
                    " request_id, definition, attempts, failures, wake_at, inactive_reason,"
                    " created, updated, completed, release_after) VALUES"
                    " (:run_id, :flow_id, :status, :phase, :current_state, :context, :output,"
                    " :creator, :creator_token, :role_tokens, :label, :tags, :monitor_by, :manage_by,"
                    " :request_id, :definition, :attempts, :failures, :wake_at, :inactive_reason,"
                    " :created, :updated, :completed, :release_after)", row)
                self._log(conn, run_id, "RunStarted", None,
                          {"flow_id": flow_id, "label": label, "tags": list(tags or [])})
        except Exception as exc:
            if request_id is not None and "UNIQUE" in str(exc):
                existing = self.store.query_one(
                    "SELECT run_id FROM runs WHERE flow_id=? AND creator=? AND request_id=?",
                    (flow_id, intro["sub"], request_id))
                if existing is not None:
                    return self.run_doc(existing["run_id"])
            raise
        self._sched.schedule(run_id, time.time())
        return self.run_doc(run_id)

    def cancel_run(self, run_id: str, intro: dict) -> dict:
        row = self._fetch(run_id)
        self._require_run_access(row, intro, "manage")
        with self._lock_for(run_id):
            row = self._fetch(run_id)
            if row["status"] in TERMINAL:
                raise AlreadyTerminal(f"run {run_id} is {row['status']}")
            poll = self.store.query_one("SELECT * FROM pending_polls WHERE run_id=?", (run_id,))
            if poll is not None:
                try:
                    self.dispatcher.cancel(poll["provider_url"], poll["token"], poll["action_id"])
                except ProviderError:
                    pass  # cancellation is advisory
            with self.store.tx() as conn:
                conn.execute("DELETE FROM pending_polls WHERE run_id=?", (run_id,))
                self._log(conn, run_id, "RunCanceled", row["current_state"], {})
                conn.execute(
                    "UPDATE runs SET status=?, phase='done', updated=?, completed=? WHERE run_id=?",
                    (RUN_CANCELED, time.time(), time.time(), run_id))
        return self.run_doc(run_id)

    def resume_run(self, run_id: str, intro: dict, role_tokens: Optional[dict] = None,
                   token: Optional[str] = None) -> dict:
        """Operator resume of an INACTIVE run, optionally with fresh tokens."""
        row = self._fetch(run_id)
        self._require_run_access(row, intro, "manage")
        with self._lock_for(run_id):
            row = self._fetch(run_id)
            if row["status"] != RUN_INACTIVE:
                raise EngineError(f"run {run_id} is {row['status']}, not INACTIVE")
            merged = json.loads(row["role_tokens"])
            merged.update(role_tokens or {})
            with self.store.tx() as conn:
                conn.execute(
                    "UPDATE runs SET status=?, phase=?, failures=0, inactive_reason=NULL,"
                    " role_tokens=?, creator_token=COALESCE(?, creator_token), updated=?"
                    " WHERE run_id=?",
                    (RUN_ACTIVE, "ready" if row["phase"] == "done" else row["phase"],
                     canonical_json(merged), token, time.time(), run_id))
            poll = self.store.query_one("SELECT * FROM pending_polls WHERE run_id=?", (run_id,))
            if poll is not None:
                # The stored derived token is what expired; re-derive it from
                # the fresh credentials before polling resumes.
                row = self._fetch(run_id)
                try:
                    fresh = self._action_token(row, self._state_of(row))
                except (AuthError, ProviderError):
                    fresh = None
                if fresh is not None:
                    with self.store.tx() as conn:
                        conn.execute(
                            "UPDATE pending_polls SET token=?, failures=0, next_poll_at=?"
                            " WHERE run_id=?", (fresh, time.time(), run_id))
        self._sched.schedule(run_id, time.time())
        return self.run_doc(run_id)

    def get_run(self, run_id: str, intro: dict) -> dict:
        row = self._fetch(run_id)
        self._require_run_access(row, intro, "monitor")
        return self.run_doc(run_id)

    def run_events(self, run_id: str, intro: Optional[dict] = None) -> list[dict]:
        row = self._fetch(run_id)
        if intro is not None:
            self._require_run_access(row, intro, "monitor")
        return [
            {"seq": r["seq"], "ts": iso(r["ts"]), "kind": r["kind"], "state": r["state"],
             "detail": json.loads(r["detail"]) if r["detail"] else {}}
            for r in self.store.query(
                "SELECT * FROM run_events WHERE run_id=? ORDER BY seq", (run_id,))
        ]

    def list_runs(self, intro: dict, *, status: Optional[str] = None, tag: Optional[str] = None,
                  label: Optional[str] = None, flow_id: Optional[str] = None,
                  cursor: Optional[str] = None, limit: int = 50) -> dict:
        """Runs the caller may see (creator, monitor, or manager), filtered."""
        identities = self.authz.expand(intro["sub"]) if intro.get("active") else set()
        clauses, params = [], []
        if status:
            clauses.append("status=?")
            params.append(status)
        if label:
            clauses.append("label=?")
            params.append(label)
        if flow_id:
            clauses.append("flow_id=?")
            params.append(flow_id)
        if cursor:
            clauses.append("created < ? OR (created = ? AND run_id > ?)")
            c_created, c_id = cursor.split("|", 1)
            params = params + [float(c_created), float(c_created), c_id]
        where = (" WHERE " + " AND ".join(f"({c})" for c in clauses)) if clauses else ""
        rows = self.store.query(
            f"SELECT * FROM runs{where} ORDER BY created DESC, run_id ASC", tuple(params))
        out, next_cursor = [], None
        for row in rows:
            visible = ({row["creator"]} | set(json.loads(row["monitor_by"]))
                       | set(json.loads(row["manage_by"])))
            if not (identities & visible):
                continue
            if tag and tag not in json.loads(row["tags"]):
                continue
            out.append(self._doc_from_row(row))
            if len(out) >= limit:
                next_cursor = f"{row['created']}|{row['run_id']}"
                break
        return {"runs": out, "cursor": next_cursor}

    def purge_run(self, run_id: str) -> None:
        with self.store.tx() as conn:
            conn.execute("DELETE FROM run_events WHERE run_id=?", (run_id,))
            conn.execute("DELETE FROM pending_polls WHERE run_id=?", (run_id,))
            conn.execute("DELETE FROM runs WHERE run_id=?", (run_id,))

    def sweep_runs(self, now: Optional[float] = None) -> int:
        """Purge terminal runs past their retention window."""
        now = time.time() if now is None else now
        rows = self.store.query(
            "SELECT run_id FROM runs WHERE status IN (?,?,?) AND completed IS NOT NULL"
            " AND completed + release_after <= ?", (*TERMINAL, now))
        for row in rows:
            self.purge_run(row["run_id"])
        return len(rows)

    # -- documents ---------------------------------------------------------------

    def run_doc(self, run_id: str) -> dict:
        return self._doc_from_row(self._fetch(run_id))

    def _doc_from_row(self, row) -> dict:
        context = json.loads(row["context"])
        doc = {
            "run_id": row["run_id"],
            "flow_id": row["flow_id"],
            "status": row["status"],
            "current_state": row["current_state"],
            "context": context.get(USER_STATE, {}),
            "output": json.loads(row["output"]) if row["output"] else None,
            "creator": row["creator"],
            "label": row["label"],
            "tags": json.loads(row["tags"]),
            "monitor_by": json.loads(row["monitor_by"]),
            "manage_by": json.loads(row["manage_by"]),
            "inactive_reason": row["inactive_reason"],
            "created": iso(row["created"]),
            "updated": iso(row["updated"]),
            "completed": iso(row["completed"]),
        }
        return doc

    def run_roles(self, run_id: str) -> RunRoles:
        row = self._fetch(run_id)
        return RunRoles(creator=row["creator"],
                        manage_by=tuple(json.loads(row["manage_by"])),
                        monitor_by=tuple(json.loads(row["monitor_by"])))

    def _require_run_access(self, row, intro: dict, relation: str) -> None:
        roles = RunRoles(creator=row["creator"],
                         manage_by=tuple(json.loads(row["manage_by"])),
                         monitor_by=tuple(json.loads(row["monitor_by"])))
        decision = self.authz.authorize_introspected(intro, None, roles, relation)
        if not decision:
            if relation == "monitor":
                flow_roles = self.flow_roles_lookup(row["flow_id"])
                if flow_roles is not None:
                    admin = self.authz.authorize_introspected(intro, None, flow_roles, "admin")
                    if admin:
                        return
            raise RunUnauthorized(decision.reason)

    # -- internals ----------------------------------------------------------------

    def _fetch(self, run_id: str):
        row = self.store.query_one("SELECT * FROM runs WHERE run_id=?", (run_id,))
        if row is None:
            raise UnknownRun(f"unknown run {run_id}")
        return row

    def _parse(self, definition: dict) -> FlowDefinition:
        key = stable_hash(canonical_json(definition))
        with self._defs_guard:
            cached = self._defs.get(key)
            if cached is not None:
                return cached
        flow = parse_flow(definition)
        with self._defs_guard:
            if len(self._defs) > 128:
                self._defs.clear()
            self._defs[key] = flow
        return flow

    def _log(self, conn, run_id: str, kind: str, state: Optional[str], detail: dict) -> None:
        seq_row = conn.execute(
            "SELECT COALESCE(MAX(seq), 0) + 1 AS seq FROM run_events WHERE run_id=?",
            (run_id,)).fetchone()
        conn.execute(
            "INSERT INTO run_events (run_id, seq, ts, kind, state, detail) VALUES (?,?,?,?,?,?)",
            (run_id, seq_row["seq"], time.time(), kind, state, canonical_json(detail)))

    def _attend(self, run_id: str) -> None:
        with self._lock_for(run_id):
            row = self.store.query_one("SELECT * FROM runs WHERE run_id=?", (run_id,))
            if row is None or row["status"] != RUN_ACTIVE:
                return
            now = time.time()
            poll = self.store.query_one("SELECT * FROM pending_polls WHERE run_id=?", (run_id,))
            if poll is not None:
                if poll["next_poll_at"] <= now:
                    self._poll(row, poll)
                else:
                    self._sched.schedule(run_id, poll["next_poll_at"])
                return
            if row["phase"] == "waiting":
                if row["wake_at"] is not None and row["wake_at"] > now:
                    self._sched.schedule(run_id, row["wake_at"])
                    return
                self._finish_wait(row)
                return
            self._step(row)

    # -- state interpretation -------------------------------------------------------

    def _step(self, row) -> None:
        run_id = row["run_id"]
        flow = self._parse(json.loads(row["definition"]))
        state = flow.states.get(row["current_state"])
        if state is None:
            self._fail_run(row, ERROR_RUNTIME, {"error": ERROR_RUNTIME,
                                                "cause": f"no such state {row['current_state']!r}"})
            return
        try:
            if state.type == "Action":
                self._step_action(row, state)
            elif state.type == "Pass":
                self._step_pass(row, state)
            elif state.type == "Choice":
                self._step_choice(row, state)
            elif state.type == "Wait":
                self._step_wait(row, state)
            else:  # Fail
                detail = {"error": state.error or "States.Fail", "cause": state.cause or ""}
                with self.store.tx() as conn:
                    self._log(conn, run_id, "StateEntered", state.name, {})
                self._fail_run(self._fetch(run_id), detail["error"], detail, state=state.name)
        except (PathNotFound, PathThroughScalar, NoMatchingChoice) as exc:
            self._fail_run(self._fetch(run_id), ERROR_RUNTIME,
                           {"error": ERROR_RUNTIME, "cause": str(exc)}, state=state.name)

    def _step_pass(self, row, state: StateDefinition) -> None:
        context = json.loads(row["context"])
        if state.result is not ABSENT and state.result_path is not None:
            context = apply_result_path(context, state.result_path, state.result)
        with self.store.tx() as conn:
            self._log(conn, row["run_id"], "StateEntered", state.name, {})
            self._log(conn, row["run_id"], "StateExited", state.name,
                      {"next": state.next} if state.next else {})
            self._advance(conn, row["run_id"], context, state)

    def _step_choice(self, row, state: StateDefinition) -> None:
        context = json.loads(row["context"])
        target = eval_choice(state, context)  # NoMatchingChoice -> runtime failure
        with self.store.tx() as conn:
            self._log(conn, row["run_id"], "StateEntered", state.name, {})
            self._log(conn, row["run_id"], "StateExited", state.name, {"next": target})
            conn.execute("UPDATE runs SET current_state=?, phase='ready', updated=? WHERE run_id=?",
                         (target, time.time(), row["run_id"]))
        self._sched.schedule(row["run_id"], time.time())

    def _step_wait(self, row, state: StateDefinition) -> None:
        if state.seconds is not None:
            wake_at = time.time() + state.seconds
        else:
            try:
                wake_at = parse_iso(state.timestamp or "")
            except ValueError:
                self._fail_run(row, ERROR_RUNTIME,
                               {"error": ERROR_RUNTIME, "cause": f"bad Wait timestamp {state.timestamp!r}"},
                               state=state.name)
                return
        with self.store.tx() as conn:
            self._log(conn, row["run_id"], "StateEntered", state.name, {"wake_at": iso(wake_at)})
            conn.execute("UPDATE runs SET phase='waiting', wake_at=?, updated=? WHERE run_id=?",
                         (wake_at, time.time(), row["run_id"]))
        self._sched.schedule(row["run_id"], wake_at)

    def _finish_wait(self, row) -> None:
        flow = self._parse(json.loads(row["definition"]))
        state = flow.states[row["current_state"]]
        context = json.loads(row["context"])
        with self.store.tx() as conn:
            self._log(conn, row["run_id"], "StateExited", state.name,
                      {"next": state.next} if state.next else {})
            conn.execute("UPDATE runs SET phase='ready', wake_at=NULL, updated=? WHERE run_id=?",
                         (time.time(), row["run_id"]))
            self._advance(conn, row["run_id"], context, state)

    def _step_action(self, row, state: StateDefinition) -> None:
        run_id = row["run_id"]
        context = json.loads(row["context"])
        params = eval_parameters(state.parameters, context) if state.parameters is not None else {}

        attempts = json.loads(row["attempts"])
        if row["phase"] != "dispatching":
            attempts[state.name] = attempts.get(state.name, 0) + 1
            request_id = stable_hash(run_id, state.name, attempts[state.name])
            with self.store.tx() as conn:
                self._log(conn, run_id, "StateEntered", state.name, {})
                self._log(conn, run_id, "ActionDispatched", state.name,
                          {"action_url": state.action_url, "request_id": request_id,
                           "attempt": attempts[state.name]})
                conn.execute("UPDATE runs SET phase='dispatching', attempts=?, updated=? WHERE run_id=?",
                             (canonical_json(attempts), time.time(), run_id))
        else:
            request_id = stable_hash(run_id, state.name, attempts.get(state.name, 1))

        try:
            token = self._action_token(row, state)
            status = self.dispatcher.run(
                state.action_url, token, request_id, params,
                monitor_by=json.loads(row["monitor_by"]), manage_by=json.loads(row["manage_by"]))
        except (Unauthorized, AuthError) as exc:
            self._deactivate(run_id, f"credentials rejected for {state.action_url}: {exc}")
            return
        except ProviderUnavailable as exc:
            self._dispatch_retry(run_id, state, str(exc))
            return
        except ProviderError as exc:
            self._action_failure(self._fetch(run_id), state, ERROR_ACTION_FAILED,
                                 {"error": ERROR_ACTION_FAILED, "cause": str(exc)}, action_id=None)
            return

        deadline = time.time() + (state.wait_time if state.wait_time else self.wait_time_default)
        if status["state"] == SUCCEEDED:
            self._action_success(self._fetch(run_id), state, status, release=True, token=token)
        elif status["state"] == FAILED:
            self._release_quietly(state.action_url, token, status["action_id"], row)
            self._action_failure(self._fetch(run_id), state, ERROR_ACTION_FAILED,
                                 self._failure_detail(status), action_id=status["action_id"])
        else:
            now = time.time()
            with self.store.tx() as conn:
                conn.execute(
                    "INSERT OR REPLACE INTO pending_polls (run_id, action_id, provider_url,"
                    " next_poll_at, current_interval, deadline, failures, token)"
                    " VALUES (?,?,?,?,?,?,0,?)",
                    (run_id, status["action_id"], state.action_url, now + self.poll_initial,
                     self.poll_initial, deadline, token))
                conn.execute("UPDATE runs SET phase='polling', failures=0, updated=? WHERE run_id=?",
                             (now, run_id))
            self._sched.schedule(run_id, now + self.poll_initial)

    def _action_token(self, row, state: StateDefinition) -> Optional[str]:
        """Dependent token for the provider's scope, derived from the run-as
        role token when the state names one, else from the creator token."""
        role_tokens = json.loads(row["role_tokens"])
        parent = role_tokens.get(state.run_as) if state.run_as else row["creator_token"]
        if parent is None:
            return None
        scope = self._provider_scope(state.action_url)
        if scope is None:
            return parent
        return self.authz.dependent_token(parent, scope)["access_token"]

    def _provider_scope(self, url: str) -> Optional[str]:
        if url in self._scope_cache:
            return self._scope_cache[url]
        try:
            scope = self.dispatcher.introspect(url).get("scope")
        except ProviderError:
            return None
        if scope:
            self._scope_cache[url] = scope
        return scope

    def _dispatch_retry(self, run_id: str, state: StateDefinition, cause: str) -> None:
        row = self._fetch(run_id)
        failures = row["failures"] + 1
        if failures > self.provider_retry_budget:
            self._deactivate(run_id, f"provider unreachable after {failures - 1} retries: {cause}")
            return
        delay = min(self.poll_initial * (2 ** (failures - 1)), self.poll_max)
        with self.store.tx() as conn:
            conn.execute("UPDATE runs SET failures=?, updated=? WHERE run_id=?",
                         (failures, time.time(), run_id))
        self._sched.schedule(run_id, time.time() + delay)

    def _deactivate(self, run_id: str, reason: str) -> None:
        with self.store.tx() as conn:
            conn.execute("UPDATE runs SET status=?, inactive_reason=?, updated=? WHERE run_id=?",
                         (RUN_INACTIVE, reason, time.time(), run_id))

    def _poll(self, row, poll) -> None:
        run_id = row["run_id"]
        now = time.time()
        try:
            status = self.dispatcher.status(poll["provider_url"], poll["token"], poll["action_id"])
        except Unauthorized as exc:
            self._deactivate(run_id, f"credentials rejected while polling: {exc}")
            return
        except (ProviderUnavailable, UnknownAction) as exc:
            failures = poll["failures"] + 1
            if failures > self.provider_retry_budget or isinstance(exc, UnknownAction):
                if isinstance(exc, UnknownAction):
                    state = self._state_of(row)
                    self._action_failure(row, state, ERROR_ACTION_FAILED,
                                         {"error": ERROR_ACTION_FAILED, "cause": str(exc)},
                                         action_id=poll["action_id"])
                else:
                    self._deactivate(run_id, f"provider unreachable while polling: {exc}")
                return
            delay = min(poll["current_interval"], self.poll_max)
            with self.store.tx() as conn:
                conn.execute("UPDATE pending_polls SET failures=?, next_poll_at=? WHERE run_id=?",
                             (failures, now + delay, run_id))
            self._sched.schedule(run_id, now + delay)
            return

        state = self._state_of(row)
        if status["state"] == SUCCEEDED:
            self._action_success(row, state, status, release=True, poll=poll)
        elif status["state"] == FAILED:
            self._release_quietly(poll["provider_url"], poll["token"], poll["action_id"], row)
            self._action_failure(row, state, ERROR_ACTION_FAILED, self._failure_detail(status),
                                 action_id=poll["action_id"])
        elif now > poll["deadline"]:
            try:
                self.dispatcher.cancel(poll["provider_url"], poll["token"], poll["action_id"])
            except ProviderError:
                pass
            self._release_quietly(poll["provider_url"], poll["token"], poll["action_id"], row)
            self._action_failure(row, state, ERROR_TIMEOUT,
                                 {"error": ERROR_TIMEOUT, "cause": "action exceeded its WaitTime",
                                  "action_id": poll["action_id"]},
                                 action_id=poll["action_id"])
        else:
            interval = next_poll_interval(poll["current_interval"], self.poll_max)
            next_at = min(now + interval, max(poll["deadline"], now + self.poll_initial))
            with self.store.tx() as conn:
                self._log(conn, run_id, "ActionPolled", state.name,
                          {"action_id": poll["action_id"], "state": ACTIVE,
                           "next_interval": interval})
                conn.execute(
                    "UPDATE pending_polls SET current_interval=?, next_poll_at=?, failures=0"
                    " WHERE run_id=?", (interval, next_at, run_id))
            self._sched.schedule(run_id, next_at)

    def _state_of(self, row) -> StateDefinition:
        flow = self._parse(json.loads(row["definition"]))
        return flow.states[row["current_state"]]

    def _failure_detail(self, status: dict) -> dict:
        detail = status.get("details")
        if not isinstance(detail, dict):
            detail = {"cause": detail}
        out = dict(detail)
        out.setdefault("error", ERROR_ACTION_FAILED)
        out["action_id"] = status.get("action_id")
        return out

    def _release_quietly(self, url: str, token: Optional[str], action_id: str, row) -> None:
        try:
            self.dispatcher.release(url, token if token else row["creator_token"], action_id)
        except ProviderError:
            pass

    def _action_success(self, row, state: StateDefinition, status: dict,
                        release: bool, poll=None, token: Optional[str] = None) -> None:
        run_id = row["run_id"]
        context = json.loads(row["context"])
        if state.result_path is not None:
            context = apply_result_path(context, state.result_path, status.get("details"))
        with self.store.tx() as conn:
            conn.execute("DELETE FROM pending_polls WHERE run_id=?", (run_id,))
            self._log(conn, run_id, "ActionCompleted", state.name,
                      {"action_id": status["action_id"]})
            self._log(conn, run_id, "StateExited", state.name,
                      {"next": state.next} if state.next else {})
            self._advance(conn, run_id, context, state)
        if release:
            if token is None and poll is not None:
                token = poll["token"]
            self._release_quietly(state.action_url, token, status["action_id"], row)

    def _action_failure(self, row, state: StateDefinition, error_name: str,
                        detail: dict, action_id: Optional[str]) -> None:
        """Route a failed or timed-out action through Catch, the
        write-failure-as-result path, or run failure."""
        run_id = row["run_id"]
        context = json.loads(row["context"])
        with self.store.tx() as conn:
            conn.execute("DELETE FROM pending_polls WHERE run_id=?", (run_id,))
            self._log(conn, run_id, "ActionFailed", state.name,
                      {"action_id": action_id, "error": error_name, "detail": detail})

            if error_name != ERROR_TIMEOUT and not state.exception_on_action_failure:
                # Failure is data: record it at the result path and move on.
                if state.result_path is not None:
                    context = apply_result_path(context, state.result_path, detail)
                self._log(conn, run_id, "StateExited", state.name,
                          {"next": state.next} if state.next else {})
                self._advance(conn, run_id, context, state)
                return

            for rule in state.catch:
                if error_name in rule.error_equals or CATCH_ALL in rule.error_equals:
                    if rule.result_path is not None:
                        context = apply_result_path(context, rule.result_path, detail)
                    self._log(conn, run_id, "CatchTaken", state.name,
                              {"error": error_name, "next": rule.next})
                    self._log(conn, run_id, "StateExited", state.name, {"next": rule.next})
                    conn.execute(
                        "UPDATE runs SET current_state=?, context=?, phase='ready', updated=?"
                        " WHERE run_id=?",
                        (rule.next, canonical_json(context), time.time(), run_id))
                    self._sched.schedule(run_id, time.time())
                    return

            self._log(conn, run_id, "RunFailed", state.name, {"error": error_name, "detail": detail})
            conn.execute(
                "UPDATE runs SET status=?, phase='done', output=?, updated=?, completed=?"
                " WHERE run_id=?",
                (RUN_FAILED, canonical_json(detail), time.time(), time.time(), run_id))

    def _advance(self, conn, run_id: str, context: Any, state: StateDefinition) -> None:
        """Move past a finished state, inside the caller's transaction."""
        now = time.time()
        if state.terminal:
            output = context.get(USER_STATE, {})
            self._log(conn, run_id, "RunCompleted", state.name, {})
            conn.execute(
                "UPDATE runs SET status=?, phase='done', context=?, output=?, updated=?, completed=?"
                " WHERE run_id=?",
                (RUN_SUCCEEDED, canonical_json(context), canonical_json(output), now, now, run_id))
        else:
            conn.execute(
                "UPDATE runs SET current_state=?, context=?, phase='ready', updated=? WHERE run_id=?",
                (state.next, canonical_json(context), now, run_id))
            self._sched.schedule(run_id, now)

    def _fail_run(self, row, error: str, detail: dict, state: Optional[str] = None) -> None:
        with self.store.tx() as conn:
            conn.execute("DELETE FROM pending_polls WHERE run_id=?", (row["run_id"],))
            self._log(conn, row["run_id"], "RunFailed", state or row["current_state"],
                      {"error": error, "detail": detail})
            conn.execute(
                "UPDATE runs SET status=?, phase='done', output=?, updated=?, completed=? WHERE run_id=?",
                (RUN_FAILED, canonical_json(detail), time.time(), time.time(), row["run_id"]))
