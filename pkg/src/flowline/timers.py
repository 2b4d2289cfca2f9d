"""Fixed-interval scheduled invocation of actions, with missed-firing recovery.

The schedule is fixed-rate: occurrence k fires at start_at + k * interval,
so the analytic firing count over any horizon is exact regardless of
downtime. Each occurrence carries a deterministic request id, which is what
keeps recovery from ever invoking the same occurrence twice.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from typing import Any, Optional

from .actions.protocol import ProviderError
from .authz import AuthService
from .dispatch import Dispatcher
from .sched import DueScheduler
from .store import Store, canonical_json
from .util import iso, new_id, stable_hash

logger = logging.getLogger(__name__)

__all__ = ["TimerService", "TimerError", "UnknownTimer", "TimerInsufficientScopes"]


class TimerError(Exception):
    pass


class UnknownTimer(TimerError):
    pass


class TimerInsufficientScopes(TimerError):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__(f"token lacks required scope(s): {missing}")


_DDL = """
CREATE TABLE IF NOT EXISTS timers (
    timer_id TEXT PRIMARY KEY,
    action_url TEXT NOT NULL,
    start_at REAL NOT NULL,
    interval REAL NOT NULL,
    count_limit INTEGER,
    end_at REAL,
    body TEXT NOT NULL,
    token TEXT,
    state TEXT NOT NULL,
    fired_count INTEGER NOT NULL DEFAULT 0,
    coalesce_missed INTEGER NOT NULL DEFAULT 0,
    creator TEXT NOT NULL,
    last_error TEXT,
    created REAL NOT NULL
);
CREATE TABLE IF NOT EXISTS timer_firings (
    timer_id TEXT NOT NULL,
    k INTEGER NOT NULL,
    request_id TEXT NOT NULL,
    state TEXT NOT NULL,
    action_id TEXT,
    ts REAL NOT NULL,
    PRIMARY KEY (timer_id, k)
);
"""


class TimerService:
    def __init__(self, store: Store, authz: AuthService, dispatcher: Dispatcher, *,
                 tick: float = 0.5, workers: int = 2):
        self.store = store
        self.authz = authz
        self.dispatcher = dispatcher
        self.tick = tick
        self.workers = workers
        self._sched = DueScheduler(tick=min(tick, 0.1))
        self._threads: list[threading.Thread] = []
        self._dispatcher_thread: Optional[threading.Thread] = None
        self._stopped = threading.Event()
        store.init_schema(_DDL)

    # -- lifecycle ------------------------------------------------------------------

    def start(self) -> None:
        self._stopped.clear()
        self._sched.start()
        # Re-arm firings that were enqueued but not completed before shutdown.
        for row in self.store.query("SELECT timer_id, k FROM timer_firings WHERE state='pending'"):
            self._sched.schedule((row["timer_id"], row["k"]), time.time())
        self._threads = [
            threading.Thread(target=self._work_loop, name=f"timer-{i}", daemon=True)
            for i in range(self.workers)
        ]
        for t in self._threads:
            t.start()
        self._dispatcher_thread = threading.Thread(
            target=self._dispatch_loop, name="timer-dispatch", daemon=True)
        self._dispatcher_thread.start()

    def stop(self) -> None:
        self._stopped.set()
        self._sched.stop()
        if self._dispatcher_thread is not None:
            self._dispatcher_thread.join(timeout=5)
        for t in self._threads:
            t.join(timeout=5)
        self._threads = []

    def _dispatch_loop(self) -> None:
        while not self._stopped.wait(self.tick):
            try:
                self.dispatch_due()
            except Exception:  # pragma: no cover
                logger.exception("timer dispatch failed")

    def _work_loop(self) -> None:
        while not self._stopped.is_set():
            item = self._sched.pop_due()
            if item is None:
                return
            try:
                self._fire(item[0], item[1])
            except Exception:
                logger.exception("timer firing %s failed unexpectedly", item)

    # -- definition -------------------------------------------------------------------

    def create_timer(self, intro: dict, token: Optional[str], *, action_url: str,
                     interval: float, start_at: Optional[float] = None,
                     count: Optional[int] = None, end_at: Optional[float] = None,
                     body: Any = None, coalesce: bool = False) -> dict:
        if not intro.get("active"):
            raise TimerError("a valid bearer token is required")
        if interval <= 0:
            raise TimerError("interval must be a positive number of seconds")
        if count is not None and count < 1:
            raise TimerError("count must be at least 1")
        try:
            scope = self.dispatcher.introspect(action_url).get("scope")
        except ProviderError as exc:
            raise TimerError(f"cannot introspect action at {action_url}: {exc}")
        if scope and scope not in intro.get("scopes", []):
            raise TimerInsufficientScopes([scope])
        start_at = time.time() if start_at is None else float(start_at)
        state = "active"
        if end_at is not None and end_at < start_at:
            state = "expired"  # an empty schedule fires zero times
        timer_id = new_id()
        self.store.execute(
            "INSERT INTO timers (timer_id, action_url, start_at, interval, count_limit, end_at,"
            " body, token, state, fired_count, coalesce_missed, creator, created)"
            " VALUES (?,?,?,?,?,?,?,?,?,0,?,?,?)",
            (timer_id, action_url, start_at, float(interval), count, end_at,
             canonical_json(body if body is not None else {}), token, state,
             1 if coalesce else 0, intro["sub"], time.time()))
        return self.timer_doc(timer_id)

    def pause_timer(self, timer_id: str, intro: dict) -> dict:
        row = self._require_owner(timer_id, intro)
        if row["state"] == "active":
            self.store.execute("UPDATE timers SET state='paused' WHERE timer_id=?", (timer_id,))
        return self.timer_doc(timer_id)

    def resume_timer(self, timer_id: str, intro: dict) -> dict:
        row = self._require_owner(timer_id, intro)
        if row["state"] == "paused":
            self.store.execute("UPDATE timers SET state='active' WHERE timer_id=?", (timer_id,))
        return self.timer_doc(timer_id)

    def delete_timer(self, timer_id: str, intro: dict) -> None:
        self._require_owner(timer_id, intro)
        with self.store.tx() as conn:
            conn.execute("DELETE FROM timer_firings WHERE timer_id=?", (timer_id,))
            conn.execute("DELETE FROM timers WHERE timer_id=?", (timer_id,))

    def list_timers(self, intro: dict) -> list[dict]:
        if not intro.get("active"):
            raise TimerError("a valid bearer token is required")
        identities = self.authz.expand(intro["sub"])
        return [self.timer_doc(row["timer_id"])
                for row in self.store.query("SELECT timer_id, creator FROM timers ORDER BY created")
                if row["creator"] in identities]

    def get_timer(self, timer_id: str, intro: dict) -> dict:
        self._require_owner(timer_id, intro)
        return self.timer_doc(timer_id)

    def _require_owner(self, timer_id: str, intro: dict):
        row = self.store.query_one("SELECT * FROM timers WHERE timer_id=?", (timer_id,))
        if row is None:
            raise UnknownTimer(timer_id)
        if not intro.get("active") or row["creator"] not in self.authz.expand(intro["sub"]):
            raise TimerError("only the timer's creator may manage it")
        return row

    def timer_doc(self, timer_id: str) -> dict:
        row = self.store.query_one("SELECT * FROM timers WHERE timer_id=?", (timer_id,))
        if row is None:
            raise UnknownTimer(timer_id)
        next_fire = row["start_at"] + row["fired_count"] * row["interval"]
        return {
            "timer_id": row["timer_id"],
            "action_url": row["action_url"],
            "start_at": iso(row["start_at"]),
            "interval": row["interval"],
            "count": row["count_limit"],
            "end_at": iso(row["end_at"]),
            "body": json.loads(row["body"]),
            "state": row["state"],
            "fired_count": row["fired_count"],
            "next_fire": iso(next_fire) if row["state"] == "active" else None,
            "coalesce": bool(row["coalesce_missed"]),
            "creator": row["creator"],
            "last_error": row["last_error"],
            "created": iso(row["created"]),
        }

    def firings(self, timer_id: str) -> list[dict]:
        return [
            {"k": row["k"], "request_id": row["request_id"], "state": row["state"],
             "action_id": row["action_id"], "ts": iso(row["ts"])}
            for row in self.store.query(
                "SELECT * FROM timer_firings WHERE timer_id=? ORDER BY k", (timer_id,))
        ]

    # -- dispatch ---------------------------------------------------------------------

    @staticmethod
    def _expired(row, k: int) -> bool:
        if row["count_limit"] is not None and k >= row["count_limit"]:
            return True
        fire_at = row["start_at"] + k * row["interval"]
        return row["end_at"] is not None and fire_at > row["end_at"]

    def dispatch_due(self, now: Optional[float] = None) -> list[tuple[str, int]]:
        """Enqueue every due occurrence, in next-fire-time order. Missed
        occurrences fire on recovery (all of them, or one when coalescing)."""
        now = time.time() if now is None else now
        fired: list[tuple[str, int]] = []
        rows = self.store.query(
            "SELECT * FROM timers WHERE state='active' ORDER BY start_at + fired_count * interval")
        for row in rows:
            k = row["fired_count"]
            due_ks: list[int] = []
            while not self._expired(row, k) and row["start_at"] + k * row["interval"] <= now:
                due_ks.append(k)
                k += 1
            if due_ks and row["coalesce_missed"] and len(due_ks) > 1:
                due_ks = [due_ks[-1]]  # collapse the backlog to the latest occurrence
            with self.store.tx() as conn:
                for dk in due_ks:
                    request_id = stable_hash("timer", row["timer_id"], dk)
                    conn.execute(
                        "INSERT OR IGNORE INTO timer_firings (timer_id, k, request_id, state, ts)"
                        " VALUES (?,?,?,'pending',?)", (row["timer_id"], dk, request_id, time.time()))
                if k != row["fired_count"]:
                    conn.execute("UPDATE timers SET fired_count=? WHERE timer_id=?",
                                 (k, row["timer_id"]))
                if self._expired(row, k):
                    conn.execute("UPDATE timers SET state='expired' WHERE timer_id=?",
                                 (row["timer_id"],))
            for dk in due_ks:
                fired.append((row["timer_id"], dk))
                self._sched.schedule((row["timer_id"], dk), time.time())
        return fired

    def _fire(self, timer_id: str, k: int) -> None:
        firing = self.store.query_one(
            "SELECT * FROM timer_firings WHERE timer_id=? AND k=?", (timer_id, k))
        row = self.store.query_one("SELECT * FROM timers WHERE timer_id=?", (timer_id,))
        if firing is None or row is None or firing["state"] != "pending":
            return
        try:
            status = self.dispatcher.run(
                row["action_url"], row["token"], firing["request_id"], json.loads(row["body"]))
        except ProviderError as exc:
            with self.store.tx() as conn:
                conn.execute("UPDATE timer_firings SET state='failed' WHERE timer_id=? AND k=?",
                             (timer_id, k))
                conn.execute("UPDATE timers SET last_error=? WHERE timer_id=?",
                             (f"occurrence {k}: {exc}", timer_id))
            return
        with self.store.tx() as conn:
            conn.execute(
                "UPDATE timer_firings SET state='dispatched', action_id=? WHERE timer_id=? AND k=?",
                (status["action_id"], timer_id, k))
