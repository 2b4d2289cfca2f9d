"""The asynchronous action-provider contract and a toolkit for writing providers.

Every provider exposes five operations: introspect, run, status, cancel,
and release. A run request carries a client-generated ``request_id``;
resubmitting the same id (per caller) returns the original action instead
of creating a new one, which is what gives callers exactly-once effects.
Status documents from all five operations share one shape. SUCCEEDED and
FAILED are terminal: after either, the status never changes again until
the record is released or expires.

Subclass :class:`ActionProvider` and implement ``execute`` (and optionally
``refresh``, ``handle_cancel``, ``recover_action``) to build a new provider;
the toolkit handles persistence, de-duplication, authorization, schema
enforcement, and retention.
"""

from __future__ import annotations

import json
import logging
import sqlite3
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Optional

from ..authz import AuthService
from ..schema import InputSchema, parse_schema, validate_input
from ..store import Store, canonical_json
from ..util import iso, new_id

logger = logging.getLogger(__name__)

ACTIVE = "ACTIVE"
SUCCEEDED = "SUCCEEDED"
FAILED = "FAILED"


class ProviderError(Exception):
    code = "provider_error"
    http_status = 500


class Unauthorized(ProviderError):
    code = "unauthorized"
    http_status = 403


class SchemaViolation(ProviderError):
    code = "schema_violation"
    http_status = 400

    def __init__(self, violations):
        self.violations = [str(v) for v in violations]
        super().__init__(f"input rejected: {self.violations}")


class UnknownAction(ProviderError):
    code = "unknown_action"
    http_status = 404


class NotTerminal(ProviderError):
    code = "not_terminal"
    http_status = 409


class InvalidRequest(ProviderError):
    code = "invalid_request"
    http_status = 400


class ProviderUnavailable(ProviderError):
    code = "provider_unavailable"
    http_status = 503


_DDL = """
CREATE TABLE IF NOT EXISTS actions (
    provider TEXT NOT NULL,
    action_id TEXT PRIMARY KEY,
    state TEXT NOT NULL,
    details TEXT,
    creator TEXT NOT NULL,
    monitor_by TEXT NOT NULL,
    manage_by TEXT NOT NULL,
    request_id TEXT NOT NULL,
    created REAL NOT NULL,
    completed REAL,
    release_after REAL NOT NULL,
    body TEXT
);
CREATE UNIQUE INDEX IF NOT EXISTS actions_dedup
    ON actions (provider, creator, request_id);
"""


class ActionProvider:
    """Base class: a named provider with a schema, a scope, and a record store."""

    name = "provider"
    title = "Action provider"
    description = ""
    admin_contact = "admin@localhost"
    schema_doc: dict = {}
    synchronous = False

    def __init__(self, host: "ProviderHost"):
        self.host = host
        self.store = host.store
        self.authz = host.authz
        self.schema: InputSchema = parse_schema(self.schema_doc)
        self.retention = host.retention
        resource_id, urls = self.authz.register_resource(f"provider:{self.name}", ["run"])
        self.resource_id = resource_id
        self.scope = urls[0]
        self._cancel_flags: dict[str, threading.Event] = {}
        self._flag_lock = threading.Lock()

    # -- protocol operations --------------------------------------------------

    def introspect(self) -> dict:
        """Descriptive and administrative information; no authentication needed."""
        return {
            "title": self.title,
            "description": self.description,
            "admin_contact": self.admin_contact,
            "scope": self.scope,
            "input_schema": self.schema.document,
            "visible_to": ["public"],
            "synchronous": self.synchronous,
        }

    def run(self, token: Optional[str], request_id: str, body: Any,
            monitor_by: Optional[list] = None, manage_by: Optional[list] = None) -> dict:
        caller = self._require_scope(token)
        if not isinstance(request_id, str) or not request_id:
            raise InvalidRequest("request_id must be a non-empty string")
        result = validate_input(self.schema, body)
        if not result.ok:
            raise SchemaViolation(result.violations)
        body = result.value

        action_id = new_id()
        now = time.time()
        row = {
            "provider": self.name, "action_id": action_id, "state": ACTIVE,
            "details": None, "creator": caller, "monitor_by": canonical_json(monitor_by or []),
            "manage_by": canonical_json(manage_by or []), "request_id": request_id,
            "created": now, "completed": None, "release_after": self.retention,
            "body": canonical_json(body),
        }
        try:
            with self.store.tx() as conn:
                conn.execute(
                    "INSERT INTO actions (provider, action_id, state, details, creator, monitor_by,"
                    " manage_by, request_id, created, completed, release_after, body)"
                    " VALUES (:provider, :action_id, :state, :details, :creator, :monitor_by,"
                    " :manage_by, :request_id, :created, :completed, :release_after, :body)",
                    row,
                )
        except sqlite3.IntegrityError:
            # Duplicate (caller, request_id): return the original action.
            existing = self.store.query_one(
                "SELECT * FROM actions WHERE provider=? AND creator=? AND request_id=?",
                (self.name, caller, request_id),
            )
            if existing is None:  # pragma: no cover - lost a race with release
                raise UnknownAction(f"request {request_id!r} raced with release")
            return self._doc(existing)

        try:
            outcome = self.execute(action_id, body, caller)
        except ProviderError:
            self._delete(action_id)
            raise
        except Exception as exc:
            logger.exception("provider %s action %s failed to start", self.name, action_id)
            outcome = (FAILED, {"error": "ProviderException", "cause": str(exc)})
        if outcome is not None:
            state, details = outcome
            self.complete(action_id, state, details)
        # No lazy refresh here: an asynchronous action reports ACTIVE from
        # run and completes through later status checks.
        return self._doc(self._fetch(action_id))

    def status(self, token: Optional[str], action_id: str, _caller: Optional[str] = None) -> dict:
        caller = _caller or self._require_token(token)
        row = self._fetch(action_id)
        self._require_access(row, caller, manage=False)
        if row["state"] == ACTIVE:
            refreshed = self.refresh(dict(row))
            if refreshed is not None:
                self.complete(action_id, refreshed[0], refreshed[1])
                row = self._fetch(action_id)
        return self._doc(row)

    def cancel(self, token: Optional[str], action_id: str) -> dict:
        caller = self._require_token(token)
        row = self._fetch(action_id)
        self._require_access(row, caller, manage=True)
        if row["state"] == ACTIVE:
            with self._flag_lock:
                flag = self._cancel_flags.get(action_id)
            if flag is not None:
                flag.set()
            self.handle_cancel(action_id, dict(row))
            row = self._fetch(action_id)
        return self._doc(row)

    def release(self, token: Optional[str], action_id: str) -> dict:
        caller = self._require_token(token)
        row = self._fetch(action_id)
        self._require_access(row, caller, manage=True)
        if row["state"] == ACTIVE:
            refreshed = self.refresh(dict(row))
            if refreshed is None:
                raise NotTerminal(f"action {action_id} is still ACTIVE")
            self.complete(action_id, refreshed[0], refreshed[1])
            row = self._fetch(action_id)
        doc = self._doc(row)
        self._delete(action_id)
        return doc

    # -- subclass hooks --------------------------------------------------------

    def execute(self, action_id: str, body: dict, creator: str) -> Optional[tuple[str, dict]]:
        """Start the work. Return a terminal (state, details) for synchronous
        providers, or None if completion happens later (worker thread, lazy
        refresh, or an external respond call)."""
        raise NotImplementedError

    def refresh(self, row: dict) -> Optional[tuple[str, dict]]:
        """Re-evaluate an ACTIVE action on read; return terminal outcome if done."""
        return None

    def handle_cancel(self, action_id: str, row: dict) -> None:
        """Advisory cancellation; default does nothing."""

    def recover_action(self, row: dict) -> None:
        """Called once per ACTIVE action on host restart."""

    # -- helpers ----------------------------------------------------------------

    def complete(self, action_id: str, state: str, details: Any) -> bool:
        """Move an ACTIVE action to a terminal state. No-op if already terminal."""
        if state not in (SUCCEEDED, FAILED):
            raise ValueError(f"not a terminal state: {state}")
        with self.store.tx() as conn:
            cur = conn.execute(
                "UPDATE actions SET state=?, details=?, completed=? WHERE action_id=? AND state=?",
                (state, canonical_json(details), time.time(), action_id, ACTIVE),
            )
            return cur.rowcount > 0

    def submit_work(self, action_id: str, fn, *args) -> None:
        with self._flag_lock:
            self._cancel_flags[action_id] = threading.Event()
        self.host.executor.submit(self._run_work, action_id, fn, *args)

    def _run_work(self, action_id: str, fn, *args) -> None:
        try:
            outcome = fn(action_id, *args)
        except Exception as exc:
            logger.exception("provider %s work for %s raised", self.name, action_id)
            outcome = (FAILED, {"error": "ProviderException", "cause": str(exc)})
        finally:
            with self._flag_lock:
                self._cancel_flags.pop(action_id, None)
        if outcome is not None:
            self.complete(action_id, outcome[0], outcome[1])

    def cancel_requested(self, action_id: str) -> bool:
        with self._flag_lock:
            flag = self._cancel_flags.get(action_id)
        return flag is not None and flag.is_set()

    def _fetch(self, action_id: str) -> sqlite3.Row:
        row = self.store.query_one(
            "SELECT * FROM actions WHERE provider=? AND action_id=?", (self.name, action_id))
        if row is None:
            raise UnknownAction(f"unknown action {action_id}")
        return row

    def _delete(self, action_id: str) -> None:
        self.store.execute("DELETE FROM actions WHERE action_id=?", (action_id,))

    def _require_token(self, token: Optional[str]) -> str:
        intro = self.authz.introspect(token)
        if not intro.get("active"):
            raise Unauthorized("a valid bearer token is required")
        return intro["sub"]

    def _require_scope(self, token: Optional[str]) -> str:
        intro = self.authz.introspect(token)
        if not intro.get("active"):
            raise Unauthorized("a valid bearer token is required")
        if self.scope not in intro.get("scopes", []):
            raise Unauthorized(f"token lacks scope {self.scope}")
        return intro["sub"]

    def _require_access(self, row: sqlite3.Row, caller: str, manage: bool) -> None:
        allowed = {row["creator"]} | set(json.loads(row["manage_by"]))
        if not manage:
            allowed |= set(json.loads(row["monitor_by"]))
        identities = self.authz.expand(caller)
        if not (identities & allowed):
            raise Unauthorized("not permitted for this action")

    def _doc(self, row: sqlite3.Row) -> dict:
        return {
            "action_id": row["action_id"],
            "state": row["state"],
            "details": json.loads(row["details"]) if row["details"] else None,
            "creator": row["creator"],
            "monitor_by": json.loads(row["monitor_by"]),
            "manage_by": json.loads(row["manage_by"]),
            "start_time": iso(row["created"]),
            "completion_time": iso(row["completed"]),
            "release_after": row["release_after"],
        }


class ProviderHost:
    """Holds the providers of one deployment plus their shared machinery:
    a record store, a worker pool for asynchronous work, and the retention
    sweeper that expires unreleased terminal actions."""

    def __init__(self, store: Store, authz: AuthService, retention: float = 30 * 86400.0,
                 sweep_interval: float = 60.0, workers: int = 4):
        self.store = store
        self.authz = authz
        self.retention = retention
        self.sweep_interval = sweep_interval
        self.executor = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="provider")
        self.providers: dict[str, ActionProvider] = {}
        self._stop = threading.Event()
        self._sweeper: Optional[threading.Thread] = None
        store.init_schema(_DDL)

    def register(self, provider: ActionProvider) -> ActionProvider:
        self.providers[provider.name] = provider
        return provider

    def get(self, name: str) -> ActionProvider:
        provider = self.providers.get(name)
        if provider is None:
            raise UnknownAction(f"no provider named {name!r}")
        return provider

    def start(self) -> None:
        self.recover()
        self._stop.clear()
        self._sweeper = threading.Thread(target=self._sweep_loop, name="action-sweeper", daemon=True)
        self._sweeper.start()

    def stop(self) -> None:
        self._stop.set()
        if self._sweeper is not None:
            self._sweeper.join(timeout=5)
        self.executor.shutdown(wait=False, cancel_futures=True)

    def recover(self) -> None:
        for provider in self.providers.values():
            rows = self.store.query(
                "SELECT * FROM actions WHERE provider=? AND state=?", (provider.name, ACTIVE))
            for row in rows:
                try:
                    provider.recover_action(dict(row))
                except Exception:  # pragma: no cover
                    logger.exception("recovery failed for %s/%s", provider.name, row["action_id"])

    def sweep_once(self, now: Optional[float] = None) -> int:
        """Delete terminal actions whose retention window has passed."""
        now = time.time() if now is None else now
        with self.store.tx() as conn:
            cur = conn.execute(
                "DELETE FROM actions WHERE state != ? AND completed IS NOT NULL"
                " AND completed + release_after <= ?",
                (ACTIVE, now),
            )
            return cur.rowcount

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.sweep_interval):
            try:
                self.sweep_once()
            except Exception:  # pragma: no cover
                logger.exception("retention sweep failed")
