"""The built-in local action providers.

Echo            synchronous; returns its input string.
Sleep           asynchronous timed no-op; completes lazily when polled.
LocalTransfer   copies files/directories between configured local roots.
LocalCompute    runs a pre-registered function or command with a payload.
SearchIndex     ingests/deletes records in an embedded inverted index.
Notify          renders a template from the action body into an outbox file.
MintId          allocates persistent "namespace/suffix" identifiers.
UserSelection   waits for a human to pick one of the offered options.
"""

from __future__ import annotations

import json
import os
import re
import shutil
import subprocess
import time
from typing import Any, Callable, Optional

from ..store import canonical_json
from .protocol import (
    ACTIVE,
    FAILED,
    SUCCEEDED,
    ActionProvider,
    InvalidRequest,
    NotTerminal,
    ProviderHost,
)

__all__ = ["build_providers", "register_function"]


class EchoProvider(ActionProvider):
    name = "echo"
    title = "Echo"
    description = "Returns its input string; for testing and demonstration."
    synchronous = True
    schema_doc = {
        "type": "object",
        "properties": {"input_string": {"type": "string", "title": "Input string"}},
        "required": ["input_string"],
    }

    def execute(self, action_id, body, creator):
        return SUCCEEDED, {"input_string": body["input_string"]}

    def recover_action(self, row):
        self.complete(row["action_id"], SUCCEEDED, {"input_string": json.loads(row["body"])["input_string"]})


class SleepProvider(ActionProvider):
    name = "sleep"
    title = "Sleep"
    description = "A timed no-op standing in for long-running actions."
    schema_doc = {
        "type": "object",
        "properties": {"seconds": {"type": "number", "title": "Seconds to sleep"}},
        "required": ["seconds"],
    }

    def execute(self, action_id, body, creator):
        if body["seconds"] < 0:
            return FAILED, {"error": "BadArgument", "cause": "seconds must be >= 0"}
        return None  # completes via refresh()

    def refresh(self, row):
        seconds = json.loads(row["body"])["seconds"]
        if time.time() >= row["created"] + seconds:
            return SUCCEEDED, {"slept": seconds}
        return None

    def handle_cancel(self, action_id, row):
        self.complete(action_id, FAILED, {"error": "Canceled", "cause": "canceled"})


class LocalTransferProvider(ActionProvider):
    name = "transfer"
    title = "Local transfer"
    description = "Copies files or directories between configured local roots."
    schema_doc = {
        "type": "object",
        "properties": {
            "source": {"type": "string", "title": "Source path"},
            "destination": {"type": "string", "title": "Destination path"},
        },
        "required": ["source", "destination"],
    }

    def __init__(self, host: ProviderHost, roots: list[str]):
        super().__init__(host)
        self.roots = [os.path.realpath(r) for r in roots]

    def _check_path(self, path: str) -> str:
        real = os.path.realpath(path)
        if not any(real == root or real.startswith(root + os.sep) for root in self.roots):
            raise InvalidRequest(f"path {path!r} is outside the configured transfer roots")
        return real

    def execute(self, action_id, body, creator):
        source = self._check_path(body["source"])
        destination = self._check_path(body["destination"])
        self.submit_work(action_id, self._copy, source, destination)
        return None

    def _copy(self, action_id, source, destination):
        if not os.path.exists(source):
            return FAILED, {"error": "SourceMissing", "cause": f"no such path: {source}"}
        copied = 0
        if os.path.isfile(source):
            os.makedirs(os.path.dirname(destination), exist_ok=True)
            shutil.copy2(source, destination)
            copied = 1
        else:
            for dirpath, _dirnames, filenames in os.walk(source):
                rel = os.path.relpath(dirpath, source)
                target_dir = os.path.join(destination, rel) if rel != "." else destination
                os.makedirs(target_dir, exist_ok=True)
                for fname in filenames:
                    # Cancellation is honored between file units.
                    if self.cancel_requested(action_id):
                        return FAILED, {"error": "Canceled", "cause": "canceled mid-transfer",
                                        "files_copied": copied}
                    shutil.copy2(os.path.join(dirpath, fname), os.path.join(target_dir, fname))
                    copied += 1
        return SUCCEEDED, {"files_copied": copied, "source": source, "destination": destination}

    def recover_action(self, row):
        body = json.loads(row["body"])
        self.submit_work(row["action_id"], self._copy,
                         os.path.realpath(body["source"]), os.path.realpath(body["destination"]))


_FUNCTIONS: dict[str, Callable[[Any], Any]] = {}


def register_function(name: str, fn: Callable[[Any], Any]) -> None:
    """Expose an in-process function to the LocalCompute provider."""
    _FUNCTIONS[name] = fn


def _fn_identity(payload: Any) -> Any:
    return payload


def _fn_fail(payload: Any) -> Any:
    message = "deliberate failure"
    if isinstance(payload, dict) and payload.get("message"):
        message = payload["message"]
    raise RuntimeError(message)


def _fn_word_count(payload: Any) -> Any:
    text = payload.get("text", "") if isinstance(payload, dict) else str(payload)
    return {"words": len(text.split())}


register_function("identity", _fn_identity)
register_function("fail", _fn_fail)
register_function("word_count", _fn_word_count)


class LocalComputeProvider(ActionProvider):
    name = "compute"
    title = "Local compute"
    description = ("Runs a pre-registered named function or command with a payload."
                   " Arbitrary code in the request body is rejected.")
    schema_doc = {
        "type": "object",
        "properties": {
            "tasks": {"type": "array", "title": "Task list"},
            "function": {"type": "string", "title": "Registered function name"},
            "payload": {"title": "Payload passed to the function"},
        },
    }

    def __init__(self, host: ProviderHost, commands: Optional[dict[str, list[str]]] = None):
        super().__init__(host)
        self.commands = dict(commands or {})
        self._procs: dict[str, subprocess.Popen] = {}

    def _tasks(self, body: dict) -> list[dict]:
        if "tasks" in body:
            tasks = body["tasks"]
            if not isinstance(tasks, list) or not tasks:
                raise InvalidRequest("tasks must be a non-empty list")
            return tasks
        if "function" in body:
            return [{"function": body["function"], "payload": body.get("payload")}]
        raise InvalidRequest("body needs either 'tasks' or 'function'")

    def execute(self, action_id, body, creator):
        tasks = self._tasks(body)
        for task in tasks:
            name = task.get("function") or task.get("command")
            if not isinstance(name, str):
                raise InvalidRequest("every task needs a 'function' or 'command' name")
            if name not in _FUNCTIONS and name not in self.commands:
                raise InvalidRequest(f"no registered function or command named {name!r}")
        self.submit_work(action_id, self._run_tasks, tasks)
        return None

    def _run_tasks(self, action_id, tasks):
        results = []
        for task in tasks:
            name = task.get("function") or task.get("command")
            payload = task.get("payload")
            if name in _FUNCTIONS:
                try:
                    results.append(_FUNCTIONS[name](payload))
                except Exception as exc:
                    return FAILED, {"error": "ActionFailedException",
                                    "cause": f"function {name!r} raised: {exc}",
                                    "results": results}
            else:
                outcome = self._run_command(action_id, name, payload)
                if outcome[0] == FAILED:
                    outcome[1]["results"] = results
                    return outcome
                results.append(outcome[1])
        return SUCCEEDED, {"results": results}

    def _run_command(self, action_id, name, payload):
        argv = self.commands[name]
        proc = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, text=True)
        self._procs[action_id] = proc
        try:
            out, err = proc.communicate(input=canonical_json(payload), timeout=3600)
        except subprocess.TimeoutExpired:
            proc.kill()
            return FAILED, {"error": "ActionFailedException", "cause": "command timed out"}
        finally:
            self._procs.pop(action_id, None)
        if proc.returncode != 0:
            return FAILED, {"error": "ActionFailedException",
                            "cause": f"command exited {proc.returncode}: {err.strip()}"}
        try:
            return SUCCEEDED, json.loads(out)
        except ValueError:
            return SUCCEEDED, {"stdout": out}

    def handle_cancel(self, action_id, row):
        # Signal the process, then give it up to 10 s before a hard kill.
        proc = self._procs.get(action_id)
        if proc is not None:
            proc.terminate()
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()

    def recover_action(self, row):
        self.complete(row["action_id"], FAILED,
                      {"error": "ActionFailedException", "cause": "interrupted by provider restart"})


class SearchIndexProvider(ActionProvider):
    name = "search"
    title = "Search index"
    description = "Ingest or delete records in an embedded inverted index."
    synchronous = True
    schema_doc = {
        "type": "object",
        "properties": {
            "operation": {"type": "string", "enum": ["ingest", "delete"], "default": "ingest"},
            "subject": {"type": "string", "title": "Record subject (identifier)"},
            "content": {"type": "object", "title": "Record content"},
        },
        "required": ["subject"],
    }

    _DDL = """
    CREATE TABLE IF NOT EXISTS search_records (
        subject TEXT PRIMARY KEY,
        content TEXT NOT NULL
    );
    CREATE TABLE IF NOT EXISTS search_terms (
        term TEXT NOT NULL,
        subject TEXT NOT NULL,
        UNIQUE (term, subject)
    );
    """

    def __init__(self, host: ProviderHost):
        super().__init__(host)
        self.store.init_schema(self._DDL)

    @staticmethod
    def _terms(value: Any) -> set[str]:
        words: set[str] = set()
        if isinstance(value, dict):
            for v in value.values():
                words |= SearchIndexProvider._terms(v)
        elif isinstance(value, list):
            for v in value:
                words |= SearchIndexProvider._terms(v)
        elif isinstance(value, str):
            words |= {w for w in re.split(r"[^a-z0-9]+", value.lower()) if w}
        return words

    def execute(self, action_id, body, creator):
        subject = body["subject"]
        if body.get("operation", "ingest") == "delete":
            with self.store.tx() as conn:
                conn.execute("DELETE FROM search_records WHERE subject=?", (subject,))
                conn.execute("DELETE FROM search_terms WHERE subject=?", (subject,))
            return SUCCEEDED, {"subject": subject, "operation": "delete"}
        content = body.get("content", {})
        with self.store.tx() as conn:
            conn.execute("INSERT OR REPLACE INTO search_records (subject, content) VALUES (?,?)",
                         (subject, canonical_json(content)))
            conn.execute("DELETE FROM search_terms WHERE subject=?", (subject,))
            for term in self._terms(content) | self._terms(subject):
                conn.execute("INSERT OR IGNORE INTO search_terms (term, subject) VALUES (?,?)",
                             (term, subject))
        return SUCCEEDED, {"subject": subject, "operation": "ingest"}

    def recover_action(self, row):
        outcome = self.execute(row["action_id"], json.loads(row["body"]), row["creator"])
        self.complete(row["action_id"], outcome[0], outcome[1])

    def query(self, text: str) -> list[dict]:
        """Keyword query; every term must match (conjunction)."""
        terms = [w for w in re.split(r"[^a-z0-9]+", text.lower()) if w]
        if not terms:
            return []
        subjects: Optional[set[str]] = None
        for term in terms:
            rows = self.store.query("SELECT subject FROM search_terms WHERE term=?", (term,))
            found = {r["subject"] for r in rows}
            subjects = found if subjects is None else subjects & found
        out = []
        for subject in sorted(subjects or ()):
            row = self.store.query_one("SELECT content FROM search_records WHERE subject=?", (subject,))
            if row:
                out.append({"subject": subject, "content": json.loads(row["content"])})
        return out


_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class NotifyProvider(ActionProvider):
    name = "notify"
    title = "Notify"
    description = ("Renders a message template with values from the action body"
                   " and appends it to the outbox file.")
    synchronous = True
    schema_doc = {
        "type": "object",
        "properties": {
            "template": {"type": "string", "title": "Message template"},
            "values": {"type": "object", "title": "Values substituted into the template"},
            "to": {"type": "string", "title": "Recipient"},
        },
        "required": ["template"],
    }

    def __init__(self, host: ProviderHost, outbox_path: str):
        super().__init__(host)
        self.outbox_path = outbox_path

    def execute(self, action_id, body, creator):
        values = body.get("values", {})

        def sub(match: re.Match) -> str:
            name = match.group(1)
            if name not in values:
                raise KeyError(name)
            value = values[name]
            return value if isinstance(value, str) else canonical_json(value)

        try:
            message = _PLACEHOLDER.sub(sub, body["template"])
        except KeyError as exc:
            return FAILED, {"error": "ActionFailedException",
                            "cause": f"template value {exc.args[0]!r} missing"}
        os.makedirs(os.path.dirname(os.path.abspath(self.outbox_path)), exist_ok=True)
        with open(self.outbox_path, "a", encoding="utf-8") as fh:
            fh.write(message + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        return SUCCEEDED, {"message": message, "to": body.get("to")}

    def recover_action(self, row):
        outcome = self.execute(row["action_id"], json.loads(row["body"]), row["creator"])
        self.complete(row["action_id"], outcome[0], outcome[1])


class MintIdProvider(ActionProvider):
    name = "mint_id"
    title = "Mint identifier"
    description = "Allocates a persistent identifier from a configured namespace."
    synchronous = True
    schema_doc = {
        "type": "object",
        "properties": {"metadata": {"type": "object", "title": "Metadata for the identifier"}},
    }

    _DDL = """
    CREATE TABLE IF NOT EXISTS mint_counters (namespace TEXT PRIMARY KEY, next INTEGER NOT NULL);
    CREATE TABLE IF NOT EXISTS minted (
        identifier TEXT PRIMARY KEY,
        metadata TEXT NOT NULL,
        creator TEXT NOT NULL,
        created REAL NOT NULL
    );
    """

    def __init__(self, host: ProviderHost, namespace: str):
        super().__init__(host)
        self.namespace = namespace
        self.store.init_schema(self._DDL)

    def execute(self, action_id, body, creator):
        with self.store.tx() as conn:
            row = conn.execute("SELECT next FROM mint_counters WHERE namespace=?",
                               (self.namespace,)).fetchone()
            nxt = row["next"] if row else 1
            conn.execute("INSERT OR REPLACE INTO mint_counters (namespace, next) VALUES (?,?)",
                         (self.namespace, nxt + 1))
            identifier = f"{self.namespace}/{nxt:06d}"
            conn.execute("INSERT INTO minted (identifier, metadata, creator, created) VALUES (?,?,?,?)",
                         (identifier, canonical_json(body.get("metadata", {})), creator, time.time()))
        return SUCCEEDED, {"identifier": identifier}

    def resolve(self, identifier: str) -> Optional[dict]:
        row = self.store.query_one("SELECT * FROM minted WHERE identifier=?", (identifier,))
        if row is None:
            return None
        return {"identifier": row["identifier"], "metadata": json.loads(row["metadata"])}

    def recover_action(self, row):
        outcome = self.execute(row["action_id"], json.loads(row["body"]), row["creator"])
        self.complete(row["action_id"], outcome[0], outcome[1])


class UserSelectionProvider(ActionProvider):
    name = "user_selection"
    title = "User selection"
    description = "Waits for a person to choose one of the offered options."
    schema_doc = {
        "type": "object",
        "properties": {
            "options": {"type": "array", "title": "Options offered to the user"},
            "prompt": {"type": "string", "title": "Question shown with the options"},
        },
        "required": ["options"],
    }

    def execute(self, action_id, body, creator):
        if not body["options"]:
            return FAILED, {"error": "BadArgument", "cause": "options must be non-empty"}
        return None  # completes when somebody responds

    def handle_cancel(self, action_id, row):
        self.complete(action_id, FAILED, {"error": "Canceled", "cause": "canceled"})

    def respond(self, token: Optional[str], action_id: str, selection: Any) -> dict:
        caller = self._require_token(token)
        row = self._fetch(action_id)
        self._require_access(row, caller, manage=True)
        if row["state"] != ACTIVE:
            raise NotTerminal(f"action {action_id} already completed")
        options = json.loads(row["body"])["options"]
        if selection not in options:
            raise InvalidRequest(f"selection {selection!r} is not one of {options}")
        self.complete(action_id, SUCCEEDED, {"selection": selection})
        return self._doc(self._fetch(action_id))

    def pending_for(self, token: Optional[str]) -> list[dict]:
        """ACTIVE selections the caller may answer."""
        caller = self._require_token(token)
        identities = self.authz.expand(caller)
        out = []
        for row in self.store.query(
                "SELECT * FROM actions WHERE provider=? AND state=? ORDER BY created", (self.name, ACTIVE)):
            allowed = {row["creator"]} | set(json.loads(row["manage_by"]))
            if identities & allowed:
                doc = self._doc(row)
                doc["body"] = json.loads(row["body"])
                out.append(doc)
        return out


def build_providers(host: ProviderHost, *, transfer_roots: list[str], outbox_path: str,
                    mint_namespace: str, compute_commands: Optional[dict] = None) -> dict[str, ActionProvider]:
    """Register the built-in provider set on a host and return it by name."""
    providers = [
        EchoProvider(host),
        SleepProvider(host),
        LocalTransferProvider(host, transfer_roots),
        LocalComputeProvider(host, compute_commands),
        SearchIndexProvider(host),
        NotifyProvider(host, outbox_path),
        MintIdProvider(host, mint_namespace),
        UserSelectionProvider(host),
    ]
    for provider in providers:
        host.register(provider)
    return {p.name: p for p in providers}
