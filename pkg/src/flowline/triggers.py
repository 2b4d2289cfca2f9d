"""Event-driven action invocation: queue in, predicate, transform, invoke.

Each enabled trigger is polled by a shared worker pool ordered by next poll
time. Matching messages invoke the target action with the queue message id
as the request id, so a redelivered message can never invoke twice; the
message is acknowledged only after the invocation has been durably handed
off. The polling interval adapts: it halves when messages arrive and
doubles when the queue is empty, within configured bounds.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Optional

from .actions.protocol import ProviderError
from .authz import AuthService
from .dispatch import Dispatcher
from .engine import next_poll_interval
from .exprs import BadExpression, eval_predicate, parse_expression, render_input
from .queues import QueueService, StaleReceipt, UnknownMessage
from .sched import DueScheduler
from .store import Store, canonical_json
from .util import iso, new_id

logger = logging.getLogger(__name__)

__all__ = ["TriggerService", "TriggerError", "UnknownTrigger", "InsufficientScopes"]


class TriggerError(Exception):
    pass


class UnknownTrigger(TriggerError):
    pass


class InsufficientScopes(TriggerError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"token lacks required scope(s): {missing}")


_DDL = """
CREATE TABLE IF NOT EXISTS triggers (
    trigger_id TEXT PRIMARY KEY,
    queue_id TEXT NOT NULL,
    action_url TEXT NOT NULL,
    predicate TEXT NOT NULL,
    template TEXT NOT NULL,
    state TEXT NOT NULL,
    token TEXT,
    creator TEXT NOT NULL,
    poll_interval REAL NOT NULL,
    consecutive_failures INTEGER NOT NULL DEFAULT 0,
    disabled_reason TEXT,
    stats TEXT NOT NULL,
    results TEXT NOT NULL,
    created REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS trigger_tracks (
    trigger_id TEXT NOT NULL,
    action_id TEXT NOT NULL,
    action_url TEXT NOT NULL,
    next_poll_at REAL NOT NULL,
    current_interval REAL NOT NULL,
    PRIMARY KEY (trigger_id, action_id)
);
"""

_ZERO_STATS = {"polls": 0, "empty_polls": 0, "messages": 0, "matched": 0,
               "discarded": 0, "invoked": 0, "failures": 0, "completed": 0}


class TriggerService:
    def __init__(self, store: Store, authz: AuthService, queues: QueueService,
                 dispatcher: Dispatcher, *, poll_min: float = 1.0, poll_max: float = 60.0,
                 batch: int = 10, failure_budget: int = 10, results_cache: int = 50,
                 track_initial: float = 2.0, track_max: float = 600.0, workers: int = 4):
        self.store = store
        self.authz = authz
        self.queues = queues
        self.dispatcher = dispatcher
        self.poll_min = poll_min
        self.poll_max = poll_max
        self.batch = batch
        self.failure_budget = failure_budget
        self.results_cache = results_cache
        self.track_initial = track_initial
        self.track_max = track_max
        self.workers = workers
        self._sched = DueScheduler(tick=0.1)
        self._threads: list[threading.Thread] = []
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._stopped = threading.Event()
        store.init_schema(_DDL)

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> None:
        self._stopped.clear()
        self._sched.start()
        for row in self.store.query("SELECT trigger_id, poll_interval FROM triggers WHERE state='enabled'"):
            self._sched.schedule(("poll", row["trigger_id"]), time.time())
        for row in self.store.query("SELECT * FROM trigger_tracks"):
            self._sched.schedule(("track", row["trigger_id"], row["action_id"]), row["next_poll_at"])
        self._threads = [
            threading.Thread(target=self._work_loop, name=f"trigger-{i}", daemon=True)
            for i in range(self.workers)
        ]
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stopped.set()
        self._sched.stop()
        for t in self._threads:
            t.join(timeout=5)
        self._threads = []

    def _work_loop(self) -> None:
        while not self._stopped.is_set():
            item = self._sched.pop_due()
            if item is None:
                return
            try:
                if item[0] == "poll":
                    self._poll_entry(item[1])
                else:
                    self._track_entry(item[1], item[2])
            except Exception:
                logger.exception("trigger worker error on %s", item)

    def _lock_for(self, trigger_id: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(trigger_id)
            if lock is None:
                lock = self._locks[trigger_id] = threading.Lock()
            return lock

    # -- definition ------------------------------------------------------------------

    def create_trigger(self, intro: dict, *, queue_id: str, action_url: str,
                       predicate: str, template: Optional[dict] = None) -> dict:
        if not intro.get("active"):
            raise TriggerError("a valid bearer token is required")
        self.queues.queue_doc(queue_id)  # raises UnknownQueue
        parse_expression(predicate)  # raises BadExpression with position
        for name, text in (template or {}).items():
            try:
                parse_expression(text)
            except BadExpression as exc:
                raise BadExpression(f"template parameter {name!r}: {exc}", exc.position)
        trigger_id = new_id()
        self.store.execute(
            "INSERT INTO triggers (trigger_id, queue_id, action_url, predicate, template, state,"
            " token, creator, poll_interval, stats, results, created)"
            " VALUES (?,?,?,?,?,'disabled',NULL,?,?,?,?,?)",
            (trigger_id, queue_id, action_url, predicate, canonical_json(template or {}),
             intro["sub"], self.poll_min, canonical_json(_ZERO_STATS), "[]", time.time()))
        return self.trigger_doc(trigger_id)

    def enable_trigger(self, trigger_id: str, token: str) -> dict:
        row = self._fetch(trigger_id)
        intro = self.authz.introspect(token)
        if not intro.get("active"):
            raise TriggerError("enable requires a valid token")
        queue = self.queues.queue_doc(row["queue_id"])
        try:
            action_scope = self.dispatcher.introspect(row["action_url"]).get("scope")
        except ProviderError as exc:
            raise TriggerError(f"cannot introspect action at {row['action_url']}: {exc}")
        required = [queue["receive_scope"]]
        if action_scope:
            required.append(action_scope)
        missing = [s for s in required if s not in intro.get("scopes", [])]
        if missing:
            raise InsufficientScopes(missing)
        self.store.execute(
            "UPDATE triggers SET state='enabled', token=?, consecutive_failures=0,"
            " disabled_reason=NULL WHERE trigger_id=?", (token, trigger_id))
        self._sched.schedule(("poll", trigger_id), time.time())
        return self.trigger_doc(trigger_id)

    def disable_trigger(self, trigger_id: str, reason: Optional[str] = None) -> dict:
        self._fetch(trigger_id)
        self.store.execute(
            "UPDATE triggers SET state='disabled', disabled_reason=? WHERE trigger_id=?",
            (reason, trigger_id))
        return self.trigger_doc(trigger_id)

    def trigger_doc(self, trigger_id: str) -> dict:
        row = self._fetch(trigger_id)
        return {
            "trigger_id": row["trigger_id"],
            "queue_id": row["queue_id"],
            "action_url": row["action_url"],
            "predicate": row["predicate"],
            "template": json.loads(row["template"]),
            "state": row["state"],
            "creator": row["creator"],
            "poll_interval": row["poll_interval"],
            "disabled_reason": row["disabled_reason"],
            "statistics": json.loads(row["stats"]),
            "recent_results": json.loads(row["results"]),
            "created": iso(row["created"]),
        }

    def _fetch(self, trigger_id: str):
        row = self.store.query_one("SELECT * FROM triggers WHERE trigger_id=?", (trigger_id,))
        if row is None:
            raise UnknownTrigger(trigger_id)
        return row

    # -- polling ---------------------------------------------------------------------

    def _poll_entry(self, trigger_id: str) -> None:
        with self._lock_for(trigger_id):
            try:
                row = self._fetch(trigger_id)
            except UnknownTrigger:
                return
            if row["state"] != "enabled":
                return  # disabled triggers consume nothing
            try:
                interval = self.poll_cycle(trigger_id)
            except Exception:
                logger.exception("trigger %s poll cycle failed", trigger_id)
                interval = min(row["poll_interval"] * 2, self.poll_max)
        if interval is not None and not self._stopped.is_set():
            self._sched.schedule(("poll", trigger_id), time.time() + interval)

    def poll_cycle(self, trigger_id: str) -> Optional[float]:
        """One receive/evaluate/invoke pass; returns the next poll interval,
        or None if the trigger is no longer enabled."""
        row = self._fetch(trigger_id)
        if row["state"] != "enabled":
            return None
        token = row["token"]
        intro = self.authz.introspect(token)
        if not intro.get("active"):
            self.disable_trigger(trigger_id, reason="stored token expired")
            return None
        predicate = parse_expression(row["predicate"])
        template = {name: parse_expression(text)
                    for name, text in json.loads(row["template"]).items()}
        delta = dict.fromkeys(_ZERO_STATS, 0)

        messages = self.queues.receive(row["queue_id"], intro, self.batch)
        delta["polls"] += 1
        failures = row["consecutive_failures"]
        disable_reason = None
        try:
            for message in messages:
                delta["messages"] += 1
                event = message["payload"]
                if not eval_predicate(predicate, event):
                    self._ack_quietly(row, intro, message)
                    delta["discarded"] += 1
                    continue
                delta["matched"] += 1
                body = render_input(template, event) if template else event
                try:
                    status = self.dispatcher.run(row["action_url"], token,
                                                 message["message_id"], body)
                except ProviderError as exc:
                    # Leave unacked; the queue will redeliver after the timeout.
                    delta["failures"] += 1
                    failures += 1
                    logger.warning("trigger %s invocation failed: %s", trigger_id, exc)
                    if failures >= self.failure_budget:
                        disable_reason = (f"{failures} consecutive invocation failures;"
                                          f" last: {exc}")
                        break
                    continue
                failures = 0
                delta["invoked"] += 1
                # Ack on durable handoff. A stale receipt just means the
                # message will come back; the request-id de-duplication
                # keeps the re-invocation harmless.
                self._ack_quietly(row, intro, message)
                if status["state"] in ("SUCCEEDED", "FAILED"):
                    self._record_result(trigger_id, status)
                    self._release_quietly(row["action_url"], token, status["action_id"])
                else:
                    with self.store.tx() as conn:
                        conn.execute(
                            "INSERT OR REPLACE INTO trigger_tracks (trigger_id, action_id,"
                            " action_url, next_poll_at, current_interval) VALUES (?,?,?,?,?)",
                            (trigger_id, status["action_id"], row["action_url"],
                             time.time() + self.track_initial, self.track_initial))
                    self._sched.schedule(("track", trigger_id, status["action_id"]),
                                         time.time() + self.track_initial)
        finally:
            if messages:
                interval = max(row["poll_interval"] / 2, self.poll_min)
            else:
                delta["empty_polls"] += 1
                interval = min(row["poll_interval"] * 2, self.poll_max)
            self._apply_stats(trigger_id, delta, interval=interval, failures=failures)
        if disable_reason is not None:
            self.disable_trigger(trigger_id, reason=disable_reason)
            return None
        return interval

    def _ack_quietly(self, row, intro: dict, message: dict) -> None:
        try:
            self.queues.ack(row["queue_id"], intro, message["message_id"], message["receipt"])
        except (StaleReceipt, UnknownMessage):
            pass  # superseded delivery; redelivery is de-duplicated

    def _apply_stats(self, trigger_id: str, delta: dict, interval: Optional[float] = None,
                     failures: Optional[int] = None, result: Optional[dict] = None) -> None:
        """Atomic read-modify-write of the stats/results documents; trigger
        polls and track completions update them concurrently."""
        with self.store.tx() as conn:
            row = conn.execute("SELECT stats, results FROM triggers WHERE trigger_id=?",
                               (trigger_id,)).fetchone()
            if row is None:
                return
            stats = {**_ZERO_STATS, **json.loads(row["stats"])}
            for key, value in delta.items():
                stats[key] = stats.get(key, 0) + value
            sets, params = ["stats=?"], [canonical_json(stats)]
            if result is not None:
                results = json.loads(row["results"])
                results.append(result)
                sets.append("results=?")
                params.append(canonical_json(results[-self.results_cache:]))
            if interval is not None:
                sets.append("poll_interval=?")
                params.append(interval)
            if failures is not None:
                sets.append("consecutive_failures=?")
                params.append(failures)
            params.append(trigger_id)
            conn.execute(f"UPDATE triggers SET {', '.join(sets)} WHERE trigger_id=?",
                         tuple(params))

    def _record_result(self, trigger_id: str, status: dict) -> None:
        self._apply_stats(
            trigger_id, {"completed": 1},
            result={"action_id": status["action_id"], "state": status["state"],
                    "completed": status.get("completion_time") or iso(time.time())})

    def _release_quietly(self, url: str, token: Optional[str], action_id: str) -> None:
        try:
            self.dispatcher.release(url, token, action_id)
        except ProviderError:
            pass

    def _track_entry(self, trigger_id: str, action_id: str) -> None:
        track = self.store.query_one(
            "SELECT * FROM trigger_tracks WHERE trigger_id=? AND action_id=?",
            (trigger_id, action_id))
        if track is None:
            return
        try:
            row = self._fetch(trigger_id)
        except UnknownTrigger:
            self.store.execute("DELETE FROM trigger_tracks WHERE trigger_id=?", (trigger_id,))
            return
        try:
            status = self.dispatcher.status(track["action_url"], row["token"], action_id)
        except ProviderError:
            status = None
        if status is not None and status["state"] in ("SUCCEEDED", "FAILED"):
            self.store.execute(
                "DELETE FROM trigger_tracks WHERE trigger_id=? AND action_id=?",
                (trigger_id, action_id))
            self._record_result(trigger_id, status)
            self._release_quietly(track["action_url"], row["token"], action_id)
            return
        interval = next_poll_interval(track["current_interval"], self.track_max)
        next_at = time.time() + interval
        self.store.execute(
            "UPDATE trigger_tracks SET next_poll_at=?, current_interval=? WHERE trigger_id=? AND action_id=?",
            (next_at, interval, trigger_id, action_id))
        if not self._stopped.is_set():
            self._sched.schedule(("track", trigger_id, action_id), next_at)
