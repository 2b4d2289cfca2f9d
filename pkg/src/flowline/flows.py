"""Flow lifecycle: publish, update, discover, delete, and run.

Publishing validates the definition and input schema, registers run/update/
delete scopes for the new flow, links the scopes of every referenced action
provider as dependents of the flow's run scope, rewrites all user path
references beneath the UserState subtree, and mounts an action-provider
endpoint at ``flows/<flow_id>`` so flows compose as actions of other flows.
"""

from __future__ import annotations

import json
import logging
import time
from typing import Any, Optional

from .actions.protocol import (
    FAILED,
    NotTerminal,
    ProviderError,
    SUCCEEDED,
    Unauthorized,
    UnknownAction,
)
from .authz import AuthService, FlowRoles, PUBLIC
from .dispatch import Dispatcher
from .engine import (
    RUN_ACTIVE,
    RUN_CANCELED,
    RUN_FAILED,
    RUN_INACTIVE,
    RUN_SUCCEEDED,
    AlreadyTerminal,
    RunEngine,
    RunUnauthorized,
    UnknownRun,
)
from .flowdef import FlowValidationError, parse_flow, rewrite_definition
from .schema import InputSchema, SchemaError, parse_schema
from .store import Store, canonical_json
from .util import iso, new_id

logger = logging.getLogger(__name__)

__all__ = ["FlowsService", "FlowProviderEndpoint", "ValidationFailed", "UnknownFlow", "FlowUnauthorized"]


class ValidationFailed(ValueError):
    def __init__(self, issues: list):
        self.issues = [str(i) for i in issues]
        super().__init__("; ".join(self.issues))


class UnknownFlow(KeyError):
    pass


class FlowUnauthorized(Exception):
    pass


_DDL = """
CREATE TABLE IF NOT EXISTS flows (
    flow_id TEXT PRIMARY KEY,
    title TEXT NOT NULL,
    description TEXT,
    keywords TEXT NOT NULL,
    definition TEXT NOT NULL,
    deployed TEXT NOT NULL,
    schema TEXT NOT NULL,
    roles TEXT NOT NULL,
    resource_id TEXT NOT NULL,
    run_scope TEXT NOT NULL,
    update_scope TEXT NOT NULL,
    delete_scope TEXT NOT NULL,
    created REAL NOT NULL,
    updated REAL NOT NULL
);
"""


class FlowsService:
    def __init__(self, store: Store, authz: AuthService, dispatcher: Dispatcher,
                 engine: RunEngine):
        self.store = store
        self.authz = authz
        self.dispatcher = dispatcher
        self.engine = engine
        store.init_schema(_DDL)
        _, urls = authz.register_resource("service:flows", ["publish", "manage"])
        self.publish_scope, self.manage_scope = urls
        dispatcher.register_prefix("flows", self.endpoint_for)
        engine.flow_roles_lookup = self.roles_of

    # -- lifecycle ---------------------------------------------------------------

    def publish_flow(self, intro: dict, *, definition: dict, input_schema: Any = None,
                     title: str = "", description: str = "", keywords: Optional[list] = None,
                     visible_to: Optional[list] = None, runnable_by: Optional[list] = None,
                     administered_by: Optional[list] = None) -> dict:
        try:
            flow = parse_flow(definition)
            schema = parse_schema(input_schema)
        except FlowValidationError as exc:
            raise ValidationFailed(exc.issues)
        except SchemaError as exc:
            raise ValidationFailed([str(exc)])
        deployed = rewrite_definition(definition)

        flow_id = new_id()
        resource_id, urls = self.authz.register_resource(
            f"flow:{flow_id}", ["run", "update", "delete"])
        run_scope, update_scope, delete_scope = urls
        self._link_action_scopes(run_scope, flow)

        roles = FlowRoles(
            owner=intro["sub"],
            administered_by=tuple(administered_by or ()),
            runnable_by=tuple(runnable_by or ()),
            visible_to=tuple(visible_to or ()),
        )
        now = time.time()
        self.store.execute(
            "INSERT INTO flows (flow_id, title, description, keywords, definition, deployed,"
            " schema, roles, resource_id, run_scope, update_scope, delete_scope, created, updated)"
            " VALUES (?,?,?,?,?,?,?,?,?,?,?,?,?,?)",
            (flow_id, title or flow_id, description, canonical_json(keywords or []),
             canonical_json(definition), canonical_json(deployed),
             canonical_json(schema.document), canonical_json(roles.to_doc()),
             resource_id, run_scope, update_scope, delete_scope, now, now))
        return self.flow_doc(flow_id, include_roles=True, warnings=list(flow.warnings))

    def _link_action_scopes(self, run_scope: str, flow) -> None:
        """Make every referenced provider's scope a dependent of the flow's
        run scope, so one consent covers the whole closure."""
        deps = []
        for state in flow.states.values():
            if state.type != "Action":
                continue
            try:
                description = self.dispatcher.introspect(state.action_url)
            except ProviderError as exc:
                raise ValidationFailed(
                    [f"state {state.name!r}: cannot introspect {state.action_url}: {exc}"])
            scope = description.get("scope")
            if scope:
                if not self.authz.scope_exists(scope):
                    self.authz.register_external_scope(scope)
                deps.append(scope)
        if deps:
            self.authz.link_dependent_scopes(run_scope, deps)

    def update_flow(self, flow_id: str, intro: dict, *, definition: Optional[dict] = None,
                    input_schema: Any = None, title: Optional[str] = None,
                    description: Optional[str] = None, keywords: Optional[list] = None,
                    visible_to: Optional[list] = None, runnable_by: Optional[list] = None,
                    administered_by: Optional[list] = None, owner: Optional[str] = None) -> dict:
        row = self._fetch(flow_id)
        roles = FlowRoles.from_doc(json.loads(row["roles"]))
        decision = self.authz.authorize_introspected(intro, None, roles, "admin")
        if not decision:
            raise FlowUnauthorized(decision.reason)
        updates: dict[str, Any] = {}
        if definition is not None:
            try:
                flow = parse_flow(definition)
            except FlowValidationError as exc:
                raise ValidationFailed(exc.issues)
            self._link_action_scopes(row["run_scope"], flow)
            updates["definition"] = canonical_json(definition)
            updates["deployed"] = canonical_json(rewrite_definition(definition))
        if input_schema is not None:
            try:
                updates["schema"] = canonical_json(parse_schema(input_schema).document)
            except SchemaError as exc:
                raise ValidationFailed([str(exc)])
        if title is not None:
            updates["title"] = title
        if description is not None:
            updates["description"] = description
        if keywords is not None:
            updates["keywords"] = canonical_json(keywords)
        role_doc = roles.to_doc()
        changed_roles = False
        for key, value in (("visible_to", visible_to), ("runnable_by", runnable_by),
                           ("administered_by", administered_by), ("owner", owner)):
            if value is not None:
                role_doc[key] = value
                changed_roles = True
        if changed_roles:
            updates["roles"] = canonical_json(role_doc)
        if updates:
            updates["updated"] = time.time()
            sets = ", ".join(f"{k}=?" for k in updates)
            self.store.execute(f"UPDATE flows SET {sets} WHERE flow_id=?",
                               (*updates.values(), flow_id))
        return self.flow_doc(flow_id, include_roles=True)

    def delete_flow(self, flow_id: str, intro: dict) -> None:
        row = self._fetch(flow_id)
        roles = FlowRoles.from_doc(json.loads(row["roles"]))
        decision = self.authz.authorize_introspected(intro, None, roles, "owner")
        if not decision:
            raise FlowUnauthorized("only the owner may remove the flow")
        with self.store.tx() as conn:
            conn.execute("DELETE FROM flows WHERE flow_id=?", (flow_id,))
        self.authz.drop_resource(row["resource_id"])

    def get_flow(self, flow_id: str, intro: dict) -> dict:
        row = self._fetch(flow_id)
        roles = FlowRoles.from_doc(json.loads(row["roles"]))
        decision = self.authz.authorize_introspected(intro, None, roles, "visible")
        if not decision:
            raise FlowUnauthorized(decision.reason)
        admin = self.authz.authorize_introspected(intro, None, roles, "admin")
        return self.flow_doc(flow_id, include_roles=bool(admin), include_definition=True)

    def list_flows(self, intro: dict, *, keyword: Optional[str] = None,
                   role: Optional[str] = None, cursor: Optional[str] = None,
                   limit: int = 50) -> dict:
        rows = self.store.query("SELECT * FROM flows ORDER BY created DESC, flow_id ASC")
        out = []
        next_cursor = None
        skipping = cursor is not None
        for row in rows:
            if skipping:
                if row["flow_id"] == cursor:
                    skipping = False
                continue
            roles = FlowRoles.from_doc(json.loads(row["roles"]))
            relation = role or "visible"
            if not self.authz.authorize_introspected(intro, None, roles, relation):
                continue
            if keyword:
                haystack = " ".join([row["title"], row["description"] or "",
                                     " ".join(json.loads(row["keywords"]))]).lower()
                if keyword.lower() not in haystack:
                    continue
            out.append(self.flow_doc(row["flow_id"]))
            if len(out) >= limit:
                next_cursor = row["flow_id"]
                break
        return {"flows": out, "cursor": next_cursor}

    # -- documents and lookups ------------------------------------------------------

    def _fetch(self, flow_id: str):
        row = self.store.query_one("SELECT * FROM flows WHERE flow_id=?", (flow_id,))
        if row is None:
            raise UnknownFlow(flow_id)
        return row

    def roles_of(self, flow_id: str) -> Optional[FlowRoles]:
        row = self.store.query_one("SELECT roles FROM flows WHERE flow_id=?", (flow_id,))
        if row is None:
            return None
        return FlowRoles.from_doc(json.loads(row["roles"]))

    def flow_doc(self, flow_id: str, include_roles: bool = False,
                 include_definition: bool = False, warnings: Optional[list] = None) -> dict:
        row = self._fetch(flow_id)
        doc = {
            "flow_id": flow_id,
            "title": row["title"],
            "description": row["description"],
            "keywords": json.loads(row["keywords"]),
            "input_schema": json.loads(row["schema"]),
            "scope": row["run_scope"],
            "action_url": self.dispatcher.url_for(f"flows/{flow_id}"),
            "created": iso(row["created"]),
            "updated": iso(row["updated"]),
        }
        if include_definition:
            doc["definition"] = json.loads(row["definition"])
        if include_roles:
            doc["roles"] = json.loads(row["roles"])
        if warnings:
            doc["warnings"] = warnings
        return doc

    def is_public(self, flow_id: str) -> bool:
        roles = self.roles_of(flow_id)
        return roles is not None and PUBLIC in roles.visible_to

    def endpoint_for(self, flow_id: str) -> Optional["FlowProviderEndpoint"]:
        if self.store.query_one("SELECT flow_id FROM flows WHERE flow_id=?", (flow_id,)) is None:
            return None
        return FlowProviderEndpoint(self, flow_id)

    # -- running ---------------------------------------------------------------------

    def start_run(self, flow_id: str, intro: dict, token: Optional[str], body: Any, *,
                  label: Optional[str] = None, tags: Optional[list] = None,
                  monitor_by: Optional[list] = None, manage_by: Optional[list] = None,
                  role_tokens: Optional[dict] = None, request_id: Optional[str] = None) -> dict:
        row = self._fetch(flow_id)
        roles = FlowRoles.from_doc(json.loads(row["roles"]))
        decision = self.authz.authorize_introspected(intro, row["run_scope"], roles, "runnable")
        if not decision:
            raise FlowUnauthorized(decision.reason)
        return self.engine.start_run(
            flow_id=flow_id,
            definition=json.loads(row["deployed"]),
            schema=InputSchema(json.loads(row["schema"])),
            intro=intro, token=token, input=body,
            label=label, tags=tags, monitor_by=monitor_by, manage_by=manage_by,
            role_tokens=role_tokens, request_id=request_id)


_RUN_STATE_MAP = {
    RUN_ACTIVE: "ACTIVE",
    RUN_INACTIVE: "ACTIVE",  # stalled but not terminal
    RUN_SUCCEEDED: SUCCEEDED,
    RUN_FAILED: FAILED,
    RUN_CANCELED: FAILED,
}


class FlowProviderEndpoint:
    """The action-provider face of one flow: run/status/cancel/release map
    onto the run engine, introspect onto the flow record."""

    def __init__(self, service: FlowsService, flow_id: str):
        self.service = service
        self.flow_id = flow_id
        self.engine = service.engine
        self.authz = service.authz

    def introspect(self) -> dict:
        row = self.service._fetch(self.flow_id)
        return {
            "title": row["title"],
            "description": row["description"],
            "admin_contact": "admin@localhost",
            "scope": row["run_scope"],
            "input_schema": json.loads(row["schema"]),
            "visible_to": json.loads(row["roles"]).get("visible_to", []),
            "synchronous": False,
            "flow_id": self.flow_id,
        }

    def run(self, token: Optional[str], request_id: str, body: Any,
            monitor_by: Optional[list] = None, manage_by: Optional[list] = None) -> dict:
        intro = self.authz.introspect(token)
        if not intro.get("active"):
            raise Unauthorized("a valid bearer token is required")
        try:
            run = self.service.start_run(
                self.flow_id, intro, token, body, request_id=request_id,
                monitor_by=monitor_by, manage_by=manage_by)
        except FlowUnauthorized as exc:
            raise Unauthorized(str(exc))
        return self.action_doc(run)

    def status(self, token: Optional[str], action_id: str) -> dict:
        intro = self.authz.introspect(token)
        try:
            return self.action_doc(self.engine.get_run(action_id, intro))
        except UnknownRun:
            raise UnknownAction(action_id)
        except RunUnauthorized as exc:
            raise Unauthorized(str(exc))

    def cancel(self, token: Optional[str], action_id: str) -> dict:
        intro = self.authz.introspect(token)
        try:
            return self.action_doc(self.engine.cancel_run(action_id, intro))
        except UnknownRun:
            raise UnknownAction(action_id)
        except RunUnauthorized as exc:
            raise Unauthorized(str(exc))
        except AlreadyTerminal:
            return self.action_doc(self.engine.run_doc(action_id))

    def release(self, token: Optional[str], action_id: str) -> dict:
        intro = self.authz.introspect(token)
        try:
            run = self.engine.get_run(action_id, intro)
        except UnknownRun:
            raise UnknownAction(action_id)
        except RunUnauthorized as exc:
            raise Unauthorized(str(exc))
        if run["status"] not in (RUN_SUCCEEDED, RUN_FAILED, RUN_CANCELED):
            raise NotTerminal(f"run {action_id} is {run['status']}")
        doc = self.action_doc(run)
        self.engine.purge_run(action_id)
        return doc

    def action_doc(self, run: dict) -> dict:
        status = run["status"]
        if status == RUN_SUCCEEDED:
            details: Any = run["output"]
        elif status in (RUN_FAILED, RUN_CANCELED):
            details = run["output"] or {"error": "RunCanceled", "cause": "run was canceled"}
            if status == RUN_CANCELED:
                details = {"error": "RunCanceled", "cause": "run was canceled"}
        else:
            details = {"current_state": run["current_state"], "status": status}
        return {
            "action_id": run["run_id"],
            "state": _RUN_STATE_MAP[status],
            "details": details,
            "creator": run["creator"],
            "monitor_by": run["monitor_by"],
            "manage_by": run["manage_by"],
            "start_time": run["created"],
            "completion_time": run["completed"],
            "release_after": self.engine.run_retention,
        }
