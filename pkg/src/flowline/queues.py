"""Named message queues with at-least-once, in-order delivery.

A received message becomes invisible until its visibility timeout elapses;
only an acknowledgment carrying the receipt from the latest delivery
removes it for good. Unacknowledged messages return to the queue at their
original position, so the deliverable set is always strictly FIFO by
enqueue sequence.
"""

from __future__ import annotations

import json
import threading
import time
from typing import Any, Optional

from .authz import AuthService
from .store import Store, canonical_json
from .util import iso, new_id

__all__ = ["QueueService", "QueueError", "UnknownQueue", "QueueUnauthorized",
           "StaleReceipt", "UnknownMessage", "PayloadTooLarge"]


class QueueError(Exception):
    pass


class UnknownQueue(QueueError):
    pass


class QueueUnauthorized(QueueError):
    pass


class StaleReceipt(QueueError):
    """The receipt belongs to a superseded delivery."""


class UnknownMessage(QueueError):
    pass


class PayloadTooLarge(QueueError):
    pass


_DDL = """
CREATE TABLE IF NOT EXISTS queues (
    queue_id TEXT PRIMARY KEY,
    label TEXT,
    visibility_timeout REAL NOT NULL,
    admins TEXT NOT NULL,
    senders TEXT NOT NULL,
    receivers TEXT NOT NULL,
    client_token TEXT,
    receive_scope TEXT NOT NULL,
    send_scope TEXT NOT NULL,
    created REAL NOT NULL
);
CREATE UNIQUE INDEX IF NOT EXISTS queues_client_token
    ON queues (client_token) WHERE client_token IS NOT NULL;
CREATE TABLE IF NOT EXISTS queue_messages (
    queue_id TEXT NOT NULL,
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    message_id TEXT UNIQUE NOT NULL,
    payload TEXT NOT NULL,
    state TEXT NOT NULL,
    delivery_count INTEGER NOT NULL DEFAULT 0,
    receipt TEXT,
    invisible_until REAL,
    sent REAL NOT NULL
);
CREATE INDEX IF NOT EXISTS queue_messages_by_queue ON queue_messages (queue_id, seq);
"""


class QueueService:
    def __init__(self, store: Store, authz: AuthService, *,
                 visibility_default: float = 30.0, max_payload: int = 256 * 1024,
                 sweep_interval: float = 1.0):
        self.store = store
        self.authz = authz
        self.visibility_default = visibility_default
        self.max_payload = max_payload
        self.sweep_interval = sweep_interval
        self._stop = threading.Event()
        self._sweeper: Optional[threading.Thread] = None
        store.init_schema(_DDL)

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        self._stop.clear()
        self._sweeper = threading.Thread(target=self._sweep_loop, name="queue-sweeper", daemon=True)
        self._sweeper.start()

    def stop(self) -> None:
        self._stop.set()
        if self._sweeper is not None:
            self._sweeper.join(timeout=5)

    def _sweep_loop(self) -> None:
        while not self._stop.wait(self.sweep_interval):
            try:
                self.sweep_once()
            except Exception:  # pragma: no cover
                pass

    def sweep_once(self, now: Optional[float] = None) -> int:
        """Return timed-out in-flight messages to the available set."""
        now = time.time() if now is None else now
        with self.store.tx() as conn:
            cur = conn.execute(
                "UPDATE queue_messages SET state='available' WHERE state='inflight'"
                " AND invisible_until <= ?", (now,))
            return cur.rowcount

    # -- queue management ------------------------------------------------------------

    def create_queue(self, intro: dict, *, label: Optional[str] = None,
                     visibility_timeout: Optional[float] = None,
                     senders: Optional[list] = None, receivers: Optional[list] = None,
                     admins: Optional[list] = None, client_token: Optional[str] = None) -> dict:
        caller = self._subject(intro)
        if client_token is not None:
            existing = self.store.query_one(
                "SELECT queue_id FROM queues WHERE client_token=?", (client_token,))
            if existing is not None:
                return self.queue_doc(existing["queue_id"])
        timeout = self.visibility_default if visibility_timeout is None else float(visibility_timeout)
        if timeout <= 0:
            raise QueueError("visibility_timeout must be positive")
        queue_id = new_id()
        admin_set = list(dict.fromkeys([caller, *(admins or ())]))  # creator is always an admin
        _, scope_urls = self.authz.register_resource(
            f"queue:{queue_id}", ["send", "receive", "admin"])
        self.store.execute(
            "INSERT INTO queues (queue_id, label, visibility_timeout, admins, senders, receivers,"
            " client_token, send_scope, receive_scope, created) VALUES (?,?,?,?,?,?,?,?,?,?)",
            (queue_id, label, timeout, canonical_json(admin_set),
             canonical_json(list(senders or [])), canonical_json(list(receivers or [])),
             client_token, scope_urls[0], scope_urls[1], time.time()))
        return self.queue_doc(queue_id)

    def update_queue(self, queue_id: str, intro: dict, *, visibility_timeout: Optional[float] = None,
                     senders: Optional[list] = None, receivers: Optional[list] = None,
                     admins: Optional[list] = None) -> dict:
        row = self._fetch(queue_id)
        self._require_role(row, intro, "admins")
        updates: dict[str, Any] = {}
        if visibility_timeout is not None:
            if visibility_timeout <= 0:
                raise QueueError("visibility_timeout must be positive")
            updates["visibility_timeout"] = float(visibility_timeout)
        if senders is not None:
            updates["senders"] = canonical_json(senders)
        if receivers is not None:
            updates["receivers"] = canonical_json(receivers)
        if admins is not None:
            updates["admins"] = canonical_json(admins)
        if updates:
            sets = ", ".join(f"{k}=?" for k in updates)
            self.store.execute(f"UPDATE queues SET {sets} WHERE queue_id=?",
                               (*updates.values(), queue_id))
        return self.queue_doc(queue_id)

    def delete_queue(self, queue_id: str, intro: dict) -> None:
        row = self._fetch(queue_id)
        self._require_role(row, intro, "admins")
        with self.store.tx() as conn:
            conn.execute("DELETE FROM queue_messages WHERE queue_id=?", (queue_id,))
            conn.execute("DELETE FROM queues WHERE queue_id=?", (queue_id,))

    def queue_doc(self, queue_id: str) -> dict:
        row = self._fetch(queue_id)
        return {
            "queue_id": row["queue_id"],
            "label": row["label"],
            "visibility_timeout": row["visibility_timeout"],
            "admins": json.loads(row["admins"]),
            "senders": json.loads(row["senders"]),
            "receivers": json.loads(row["receivers"]),
            "receive_scope": row["receive_scope"],
            "send_scope": row["send_scope"],
            "created": iso(row["created"]),
        }

    def get_queue(self, queue_id: str, intro: dict) -> dict:
        row = self._fetch(queue_id)
        self._require_role(row, intro, "any")
        return self.queue_doc(queue_id)

    def depth(self, queue_id: str) -> dict:
        rows = self.store.query(
            "SELECT state, COUNT(*) AS n FROM queue_messages WHERE queue_id=? GROUP BY state",
            (queue_id,))
        counts = {row["state"]: row["n"] for row in rows}
        return {"available": counts.get("available", 0), "inflight": counts.get("inflight", 0)}

    # -- messaging ---------------------------------------------------------------------

    def send(self, queue_id: str, intro: dict, payload: Any) -> str:
        row = self._fetch(queue_id)
        self._require_role(row, intro, "senders")
        body = canonical_json(payload)
        if len(body.encode("utf-8")) > self.max_payload:
            raise PayloadTooLarge(f"payload exceeds {self.max_payload} bytes")
        message_id = new_id()
        self.store.execute(
            "INSERT INTO queue_messages (queue_id, message_id, payload, state, sent)"
            " VALUES (?,?,?,'available',?)", (queue_id, message_id, body, time.time()))
        return message_id

    def receive(self, queue_id: str, intro: dict, max_n: int = 10) -> list[dict]:
        row = self._fetch(queue_id)
        self._require_role(row, intro, "receivers")
        now = time.time()
        out = []
        with self.store.tx() as conn:
            rows = conn.execute(
                "SELECT * FROM queue_messages WHERE queue_id=? AND (state='available'"
                " OR (state='inflight' AND invisible_until <= ?)) ORDER BY seq LIMIT ?",
                (queue_id, now, max_n)).fetchall()
            for msg in rows:
                receipt = new_id()
                conn.execute(
                    "UPDATE queue_messages SET state='inflight', receipt=?, invisible_until=?,"
                    " delivery_count=delivery_count+1 WHERE message_id=?",
                    (receipt, now + row["visibility_timeout"], msg["message_id"]))
                out.append({
                    "message_id": msg["message_id"],
                    "receipt": receipt,
                    "payload": json.loads(msg["payload"]),
                    "delivery_count": msg["delivery_count"] + 1,
                })
        return out

    def ack(self, queue_id: str, intro: dict, message_id: str, receipt: str) -> None:
        row = self._fetch(queue_id)
        self._require_role(row, intro, "receivers")
        with self.store.tx() as conn:
            msg = conn.execute(
                "SELECT * FROM queue_messages WHERE queue_id=? AND message_id=?",
                (queue_id, message_id)).fetchone()
            if msg is None:
                raise UnknownMessage(f"no in-flight message {message_id}")
            if msg["receipt"] != receipt:
                raise StaleReceipt("receipt belongs to a superseded delivery")
            conn.execute("DELETE FROM queue_messages WHERE message_id=?", (message_id,))

    def return_message(self, queue_id: str, intro: dict, message_id: str,
                       receipt: Optional[str] = None) -> None:
        """Make an in-flight message deliverable again right away (the
        visibility-release operation; also what tests use to force
        redelivery deterministically)."""
        row = self._fetch(queue_id)
        self._require_role(row, intro, "receivers")
        with self.store.tx() as conn:
            msg = conn.execute(
                "SELECT * FROM queue_messages WHERE queue_id=? AND message_id=?",
                (queue_id, message_id)).fetchone()
            if msg is None:
                raise UnknownMessage(message_id)
            if receipt is not None and msg["receipt"] != receipt:
                raise StaleReceipt("receipt belongs to a superseded delivery")
            conn.execute(
                "UPDATE queue_messages SET state='available' WHERE message_id=? AND state='inflight'",
                (message_id,))

    # -- helpers --------------------------------------------------------------------------

    def _fetch(self, queue_id: str):
        row = self.store.query_one("SELECT * FROM queues WHERE queue_id=?", (queue_id,))
        if row is None:
            raise UnknownQueue(queue_id)
        return row

    def _subject(self, intro: dict) -> str:
        if not intro.get("active"):
            raise QueueUnauthorized("a valid bearer token is required")
        return intro["sub"]

    def _require_role(self, row, intro: dict, role: str) -> str:
        # Queue roles are not cumulative: an administrator who wants to send
        # or receive must hold that role explicitly.
        caller = self._subject(intro)
        identities = self.authz.expand(caller)
        if role == "any":
            allowed = (set(json.loads(row["admins"])) | set(json.loads(row["senders"]))
                       | set(json.loads(row["receivers"])))
        else:
            allowed = set(json.loads(row[role]))
        if not (identities & allowed):
            raise QueueUnauthorized(f"caller is not in the queue's {role}")
        return caller
