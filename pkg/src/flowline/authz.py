"""Built-in token issuer and authorization engine.

Tokens are opaque random strings stored server-side and checked through an
introspection call, never by parsing the token itself. Every protected
resource registers scopes named ``<PREFIX>/<resource-uuid>/<op>``; scopes
may depend on other scopes, and issuing a token requires consent to the
full transitive dependency closure.

Role checks are cumulative: an identity allowed at a stronger relation
(say, administrator) implicitly passes weaker checks (runnable, visible).
"""

from __future__ import annotations

import json
import re
import secrets
import time
import uuid
from dataclasses import dataclass
from typing import Any, Iterable, Optional

from .store import Store, canonical_json

__all__ = [
    "AuthService",
    "AuthError",
    "ConsentRequired",
    "CycleDetected",
    "UnknownScope",
    "FlowRoles",
    "RunRoles",
    "Decision",
    "PUBLIC",
    "ALL_AUTHENTICATED",
    "is_scope_url",
]

PUBLIC = "public"
ALL_AUTHENTICATED = "all_authenticated_users"

_SCOPE_RE = re.compile(r"^https?://\S+/[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}/[a-z][a-z0-9_]*$")
_OP_RE = re.compile(r"^[a-z][a-z0-9_]*$")


def is_scope_url(text: Any) -> bool:
    return isinstance(text, str) and _SCOPE_RE.match(text) is not None


class AuthError(Exception):
    pass


class UnknownScope(AuthError):
    pass


class CycleDetected(AuthError):
    pass


class ConsentRequired(AuthError):
    """Issuance refused; ``required`` lists the full dependency closure."""

    def __init__(self, required: list[str]):
        self.required = required
        super().__init__(f"consent required for dependent scopes: {required}")


@dataclass(frozen=True)
class FlowRoles:
    owner: str
    administered_by: tuple[str, ...] = ()
    runnable_by: tuple[str, ...] = ()
    visible_to: tuple[str, ...] = ()

    def to_doc(self) -> dict:
        return {
            "owner": self.owner,
            "administered_by": list(self.administered_by),
            "runnable_by": list(self.runnable_by),
            "visible_to": list(self.visible_to),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "FlowRoles":
        return cls(
            owner=doc["owner"],
            administered_by=tuple(doc.get("administered_by", ())),
            runnable_by=tuple(doc.get("runnable_by", ())),
            visible_to=tuple(doc.get("visible_to", ())),
        )


@dataclass(frozen=True)
class RunRoles:
    creator: str
    manage_by: tuple[str, ...] = ()
    monitor_by: tuple[str, ...] = ()


@dataclass(frozen=True)
class Decision:
    allow: bool
    reason: str = ""
    subject: Optional[str] = None

    def __bool__(self) -> bool:
        return self.allow


_DDL = """
CREATE TABLE IF NOT EXISTS principals (
    id TEXT PRIMARY KEY,
    kind TEXT NOT NULL,
    name TEXT UNIQUE NOT NULL,
    secret TEXT
);
CREATE TABLE IF NOT EXISTS memberships (
    member_id TEXT NOT NULL,
    group_id TEXT NOT NULL,
    UNIQUE (member_id, group_id)
);
CREATE TABLE IF NOT EXISTS resources (
    id TEXT PRIMARY KEY,
    name TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS scopes (
    url TEXT PRIMARY KEY,
    resource_id TEXT NOT NULL,
    op TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS scope_deps (
    parent TEXT NOT NULL,
    child TEXT NOT NULL,
    UNIQUE (parent, child)
);
CREATE TABLE IF NOT EXISTS tokens (
    value TEXT PRIMARY KEY,
    subject TEXT NOT NULL,
    scopes TEXT NOT NULL,
    consented TEXT NOT NULL,
    expires REAL NOT NULL,
    refresh TEXT
);
CREATE TABLE IF NOT EXISTS consents (
    subject TEXT NOT NULL,
    scope TEXT NOT NULL,
    UNIQUE (subject, scope)
);
"""


class AuthService:
    def __init__(self, store: Store, scope_prefix: str, token_lifetime: float = 48 * 3600.0):
        self.store = store
        self.scope_prefix = scope_prefix.rstrip("/")
        self.token_lifetime = token_lifetime
        store.init_schema(_DDL)

    # -- principals ----------------------------------------------------------

    def create_principal(self, name: str, kind: str = "user", secret: Optional[str] = None) -> str:
        existing = self.store.query_one("SELECT id FROM principals WHERE name=?", (name,))
        if existing:
            return existing["id"]
        pid = str(uuid.uuid4())
        self.store.execute(
            "INSERT INTO principals (id, kind, name, secret) VALUES (?,?,?,?)",
            (pid, kind, name, secret),
        )
        return pid

    def principal_by_name(self, name: str) -> Optional[dict]:
        row = self.store.query_one("SELECT * FROM principals WHERE name=?", (name,))
        return dict(row) if row else None

    def principal(self, pid: str) -> Optional[dict]:
        row = self.store.query_one("SELECT * FROM principals WHERE id=?", (pid,))
        return dict(row) if row else None

    def add_member(self, group_id: str, member_id: str) -> None:
        # Edge member -> group; a cycle appears iff the group already reaches
        # the member through the membership graph.
        if group_id == member_id or member_id in self._groups_of(group_id):
            raise CycleDetected(f"membership of {member_id} in {group_id} would create a cycle")
        self.store.execute(
            "INSERT OR IGNORE INTO memberships (member_id, group_id) VALUES (?,?)",
            (member_id, group_id),
        )

    def _groups_of(self, pid: str) -> set[str]:
        """Transitive groups of ``pid``."""
        seen: set[str] = set()
        stack = [pid]
        while stack:
            cur = stack.pop()
            rows = self.store.query("SELECT group_id FROM memberships WHERE member_id=?", (cur,))
            for row in rows:
                gid = row["group_id"]
                if gid not in seen:
                    seen.add(gid)
                    stack.append(gid)
        return seen

    def expand(self, pid: str) -> set[str]:
        """The principal plus every group it belongs to, transitively."""
        return {pid} | self._groups_of(pid)

    def bootstrap(self, users: Iterable[dict], groups: Iterable[dict] = ()) -> None:
        group_ids: dict[str, str] = {}
        for gdoc in groups:
            group_ids[gdoc["name"]] = self.create_principal(gdoc["name"], kind="group")
        for udoc in users:
            pid = self.create_principal(udoc["name"], kind=udoc.get("kind", "user"),
                                        secret=udoc.get("secret"))
            for gname in udoc.get("groups", ()):
                gid = group_ids.get(gname) or self.create_principal(gname, kind="group")
                group_ids[gname] = gid
                self.add_member(gid, pid)

    # -- scopes ---------------------------------------------------------------

    def register_resource(self, name: str, ops: list[str]) -> tuple[str, list[str]]:
        """Register a named resource and one scope per operation. Re-registering
        the same name returns the existing identifier and scope URLs, so
        resources keep stable scopes across restarts."""
        if len(set(ops)) != len(ops):
            raise AuthError(f"duplicate op names in {ops}")
        for op in ops:
            if not _OP_RE.match(op):
                raise AuthError(f"bad op name {op!r}")
        with self.store.tx() as conn:
            existing = conn.execute("SELECT id FROM resources WHERE name=?", (name,)).fetchone()
            if existing is not None:
                rid = existing["id"]
                rows = conn.execute("SELECT url, op FROM scopes WHERE resource_id=?",
                                    (rid,)).fetchall()
                by_op = {r["op"]: r["url"] for r in rows}
                missing = [op for op in ops if op not in by_op]
                if missing:
                    raise AuthError(f"resource {name!r} exists without op(s) {missing}")
                return rid, [by_op[op] for op in ops]
            rid = str(uuid.uuid4())
            urls = [f"{self.scope_prefix}/{rid}/{op}" for op in ops]
            conn.execute("INSERT INTO resources (id, name) VALUES (?,?)", (rid, name))
            for op, url in zip(ops, urls):
                conn.execute("INSERT INTO scopes (url, resource_id, op) VALUES (?,?,?)", (url, rid, op))
            return rid, urls

    def register_external_scope(self, url: str) -> None:
        """Record a scope registered by a provider hosted elsewhere."""
        if not is_scope_url(url):
            raise UnknownScope(f"not a scope URL: {url!r}")
        rid = url.rsplit("/", 2)[-2]
        op = url.rsplit("/", 1)[-1]
        self.store.execute(
            "INSERT OR IGNORE INTO scopes (url, resource_id, op) VALUES (?,?,?)", (url, rid, op))

    def drop_resource(self, resource_id: str) -> None:
        with self.store.tx() as conn:
            rows = conn.execute("SELECT url FROM scopes WHERE resource_id=?", (resource_id,)).fetchall()
            for row in rows:
                conn.execute("DELETE FROM scope_deps WHERE parent=? OR child=?", (row["url"], row["url"]))
            conn.execute("DELETE FROM scopes WHERE resource_id=?", (resource_id,))
            conn.execute("DELETE FROM resources WHERE id=?", (resource_id,))

    def scope_exists(self, url: str) -> bool:
        return self.store.query_one("SELECT url FROM scopes WHERE url=?", (url,)) is not None

    def link_dependent_scopes(self, scope: str, deps: Iterable[str]) -> None:
        deps = list(deps)
        for dep in deps:
            # Edge scope -> dep; a cycle appears iff dep already reaches scope.
            if dep == scope or scope in self.scope_closure(dep):
                raise CycleDetected(f"dependency {scope} -> {dep} creates a cycle")
        with self.store.tx() as conn:
            for dep in deps:
                conn.execute("INSERT OR IGNORE INTO scope_deps (parent, child) VALUES (?,?)", (scope, dep))

    def scope_closure(self, scope: str) -> set[str]:
        """Transitive dependent scopes of ``scope`` (the scope itself excluded)."""
        seen: set[str] = set()
        stack = [scope]
        while stack:
            cur = stack.pop()
            for row in self.store.query("SELECT child FROM scope_deps WHERE parent=?", (cur,)):
                child = row["child"]
                if child not in seen:
                    seen.add(child)
                    stack.append(child)
        seen.discard(scope)
        return seen

    def closure_of(self, scopes: Iterable[str]) -> set[str]:
        out: set[str] = set()
        for s in scopes:
            out |= self.scope_closure(s)
        return out

    # -- tokens ---------------------------------------------------------------

    def grant_consent(self, subject: str, scopes: Iterable[str]) -> None:
        with self.store.tx() as conn:
            for s in scopes:
                conn.execute("INSERT OR IGNORE INTO consents (subject, scope) VALUES (?,?)", (subject, s))

    def standing_consents(self, subject: str) -> set[str]:
        return {row["scope"] for row in self.store.query(
            "SELECT scope FROM consents WHERE subject=?", (subject,))}

    def issue_token(self, subject: str, scopes: list[str], consent: Any = None,
                    lifetime: Optional[float] = None, with_refresh: bool = True) -> dict:
        for s in scopes:
            if not self.scope_exists(s):
                raise UnknownScope(s)
        closure = self.closure_of(scopes)
        if consent == "all":
            granted = closure
        else:
            granted = set(consent or ()) | self.standing_consents(subject)
        missing = closure - granted - set(scopes)
        if missing:
            raise ConsentRequired(sorted(closure))
        if closure:
            self.grant_consent(subject, closure)
        value = secrets.token_urlsafe(32)
        refresh = secrets.token_urlsafe(24) if with_refresh else None
        expires = time.time() + (lifetime if lifetime is not None else self.token_lifetime)
        consented = sorted(set(scopes) | closure)
        self.store.execute(
            "INSERT INTO tokens (value, subject, scopes, consented, expires, refresh) VALUES (?,?,?,?,?,?)",
            (value, subject, canonical_json(sorted(scopes)), canonical_json(consented), expires, refresh),
        )
        return {"access_token": value, "refresh_token": refresh, "expires_at": expires,
                "subject": subject, "scopes": sorted(scopes)}

    def login(self, name: str, secret: str, scopes: list[str], consent: Any = None,
              lifetime: Optional[float] = None) -> dict:
        row = self.principal_by_name(name)
        if row is None or row.get("secret") != secret or row["kind"] == "group":
            raise AuthError("bad credentials")
        return self.issue_token(row["id"], scopes, consent=consent, lifetime=lifetime)

    def introspect(self, value: Optional[str]) -> dict:
        if not value:
            return {"active": False}
        row = self.store.query_one("SELECT * FROM tokens WHERE value=?", (value,))
        if row is None or row["expires"] <= time.time():
            return {"active": False}
        principal = self.principal(row["subject"])
        return {
            "active": True,
            "sub": row["subject"],
            "username": principal["name"] if principal else None,
            "scopes": json.loads(row["scopes"]),
            "consented": json.loads(row["consented"]),
            "exp": row["expires"],
        }

    def dependent_token(self, parent_value: str, scope: str) -> dict:
        intro = self.introspect(parent_value)
        if not intro["active"]:
            raise AuthError("parent token invalid or expired")
        if scope not in set(intro["consented"]) | set(intro["scopes"]):
            raise ConsentRequired(sorted(self.scope_closure(scope) | {scope}))
        value = secrets.token_urlsafe(32)
        consented = sorted({scope} | self.scope_closure(scope))
        self.store.execute(
            "INSERT INTO tokens (value, subject, scopes, consented, expires, refresh) VALUES (?,?,?,?,?,?)",
            (value, intro["sub"], canonical_json([scope]), canonical_json(consented),
             intro["exp"], None),
        )
        return {"access_token": value, "expires_at": intro["exp"], "subject": intro["sub"],
                "scopes": [scope]}

    def refresh_token(self, refresh: str) -> dict:
        row = self.store.query_one("SELECT * FROM tokens WHERE refresh=?", (refresh,))
        if row is None:
            raise AuthError("unknown refresh handle")
        value = secrets.token_urlsafe(32)
        expires = time.time() + self.token_lifetime
        with self.store.tx() as conn:
            conn.execute("UPDATE tokens SET refresh=NULL WHERE value=?", (row["value"],))
            conn.execute(
                "INSERT INTO tokens (value, subject, scopes, consented, expires, refresh) VALUES (?,?,?,?,?,?)",
                (value, row["subject"], row["scopes"], row["consented"], expires, refresh),
            )
        return {"access_token": value, "refresh_token": refresh, "expires_at": expires,
                "subject": row["subject"], "scopes": json.loads(row["scopes"])}

    # -- authorization --------------------------------------------------------

    def authorize(self, token: Optional[str], required_scope: Optional[str],
                  roles: Any, relation: str) -> Decision:
        return self.authorize_introspected(self.introspect(token), required_scope, roles, relation)

    def authorize_introspected(self, intro: dict, required_scope: Optional[str],
                               roles: Any, relation: str) -> Decision:
        """Decide from introspection output alone (token opacity)."""
        anonymous = not intro.get("active")
        if isinstance(roles, FlowRoles):
            allowed_sets = self._flow_members(roles, relation)
        elif isinstance(roles, RunRoles):
            allowed_sets = self._run_members(roles, relation)
        else:
            raise AuthError(f"unknown role set {roles!r}")
        members, specials = allowed_sets

        if anonymous:
            if PUBLIC in specials:
                return Decision(True, "public", None)
            return Decision(False, "authentication required", None)
        if required_scope is not None and required_scope not in intro.get("scopes", []):
            return Decision(False, f"token lacks scope {required_scope}", intro.get("sub"))
        if PUBLIC in specials or ALL_AUTHENTICATED in specials:
            return Decision(True, "granted to all authenticated users", intro["sub"])
        identities = self.expand(intro["sub"])
        if identities & members:
            return Decision(True, "role match", intro["sub"])
        return Decision(False, f"no {relation} permission", intro["sub"])

    def _flow_members(self, roles: FlowRoles, relation: str) -> tuple[set[str], set[str]]:
        order = ("visible", "runnable", "admin", "owner")
        if relation not in order:
            raise AuthError(f"unknown flow relation {relation!r}")
        level = order.index(relation)
        members: set[str] = {roles.owner}
        specials: set[str] = set()
        # Cumulative: stronger roles satisfy weaker relations.
        if level <= 2:
            members |= set(roles.administered_by)
        if level <= 1:
            members |= set(roles.runnable_by) - {ALL_AUTHENTICATED}
            if ALL_AUTHENTICATED in roles.runnable_by:
                specials.add(ALL_AUTHENTICATED)
        if level == 0:
            members |= set(roles.visible_to) - {PUBLIC}
            if PUBLIC in roles.visible_to:
                specials.add(PUBLIC)
        return members, specials

    def _run_members(self, roles: RunRoles, relation: str) -> tuple[set[str], set[str]]:
        order = ("monitor", "manage", "creator")
        if relation not in order:
            raise AuthError(f"unknown run relation {relation!r}")
        level = order.index(relation)
        members: set[str] = {roles.creator}
        if level <= 1:
            members |= set(roles.manage_by)
        if level == 0:
            members |= set(roles.monitor_by)
        return members, set()
