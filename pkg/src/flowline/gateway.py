"""JSON-over-HTTP surface for every service, mounted under one listener.

Paths are namespaced per service: /flows, /runs, /queues, /triggers,
/timers, /auth, /providers/<name>. Errors come back as
``{code, message, detail}``. Every route is covered by an entry in
ROUTE_POLICIES; a test enumerates the routes and asserts that no route
ships without a policy.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from typing import Any, Optional

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from . import __version__
from .actions.builtin import MintIdProvider, SearchIndexProvider, UserSelectionProvider
from .actions.protocol import ProviderError
from .authz import AuthError, ConsentRequired, CycleDetected, UnknownScope
from .engine import AlreadyTerminal, EngineError, MissingRoleToken, RunUnauthorized, UnknownRun
from .exprs import BadExpression
from .flowdef import FlowValidationError
from .flows import FlowUnauthorized, UnknownFlow, ValidationFailed
from .queues import (
    PayloadTooLarge,
    QueueError,
    QueueUnauthorized,
    StaleReceipt,
    UnknownMessage,
    UnknownQueue,
)
from .schema import SchemaError
from .service import Platform
from .timers import TimerError, TimerInsufficientScopes, UnknownTimer
from .triggers import InsufficientScopes, TriggerError, UnknownTrigger
from .util import new_id, parse_iso

logger = logging.getLogger(__name__)

__all__ = ["create_app", "ROUTE_POLICIES"]

# (method, path) -> authorization policy. "open" routes need no token;
# "token" routes need a valid bearer token; "resource" routes additionally
# enforce per-resource roles/scopes in the service layer they call.
ROUTE_POLICIES: dict[tuple[str, str], str] = {}


def _policy(method: str, path: str, policy: str) -> None:
    ROUTE_POLICIES[(method, path)] = policy


class _RateLimiter:
    """Token bucket per principal (or client address when anonymous)."""

    def __init__(self, rate: float, burst: int):
        self.rate = rate
        self.burst = burst
        self._buckets: dict[str, tuple[float, float]] = {}
        self._lock = threading.Lock()

    def allow(self, key: str) -> bool:
        now = time.time()
        with self._lock:
            tokens, stamp = self._buckets.get(key, (float(self.burst), now))
            tokens = min(self.burst, tokens + (now - stamp) * self.rate)
            if tokens < 1.0:
                self._buckets[key] = (tokens, now)
                return False
            self._buckets[key] = (tokens - 1.0, now)
            return True


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, detail: Any = None):
        self.status = status
        self.code = code
        self.message = message
        self.detail = detail
        super().__init__(message)


def _error_response(status: int, code: str, message: str, detail: Any = None) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"code": code, "message": message, "detail": detail})


_ERROR_MAP: list[tuple[type, int, str]] = [
    (ConsentRequired, 403, "consent_required"),
    (UnknownScope, 400, "unknown_scope"),
    (CycleDetected, 409, "cycle_detected"),
    (AuthError, 403, "auth_error"),
    (ValidationFailed, 400, "validation_failed"),
    (FlowValidationError, 400, "validation_failed"),
    (SchemaError, 400, "bad_schema"),
    (BadExpression, 400, "bad_expression"),
    (UnknownFlow, 404, "unknown_flow"),
    (FlowUnauthorized, 403, "unauthorized"),
    (UnknownRun, 404, "unknown_run"),
    (RunUnauthorized, 403, "unauthorized"),
    (MissingRoleToken, 400, "missing_role_token"),
    (AlreadyTerminal, 409, "already_terminal"),
    (EngineError, 400, "engine_error"),
    (UnknownQueue, 404, "unknown_queue"),
    (UnknownMessage, 404, "unknown_message"),
    (StaleReceipt, 409, "stale_receipt"),
    (PayloadTooLarge, 413, "payload_too_large"),
    (QueueUnauthorized, 403, "unauthorized"),
    (QueueError, 400, "queue_error"),
    (UnknownTrigger, 404, "unknown_trigger"),
    (InsufficientScopes, 403, "insufficient_scopes"),
    (TriggerError, 400, "trigger_error"),
    (UnknownTimer, 404, "unknown_timer"),
    (TimerInsufficientScopes, 403, "insufficient_scopes"),
    (TimerError, 400, "timer_error"),
]


def create_app(platform: Platform) -> FastAPI:
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        # The request thread pool is the "worker count": its size bounds how
        # many in-flight requests the gateway serves concurrently.
        import anyio.to_thread
        anyio.to_thread.current_default_thread_limiter().total_tokens = max(
            platform.config.http_workers, 1)
        yield

    app = FastAPI(title="flowline", version=__version__, docs_url=None, redoc_url=None,
                  lifespan=lifespan)
    app.state.platform = platform
    limiter = _RateLimiter(platform.config.rate_limit_per_sec, platform.config.rate_limit_burst)
    authz = platform.authz

    # -- plumbing ---------------------------------------------------------------

    def token_of(request: Request) -> Optional[str]:
        header = request.headers.get("authorization", "")
        if header.lower().startswith("bearer "):
            return header[7:].strip()
        return None

    def intro_of(request: Request) -> dict:
        return authz.introspect(token_of(request))

    def require_active(request: Request) -> dict:
        intro = intro_of(request)
        if not intro.get("active"):
            raise ApiError(401, "invalid_token", "a valid bearer token is required")
        return intro

    def rate_limit(request: Request) -> None:
        intro = intro_of(request)
        key = intro.get("sub") or f"anon:{request.client.host if request.client else '?'}"
        if not limiter.allow(key):
            raise ApiError(429, "rate_limited", "request rate limit exceeded")

    async def body_json(request: Request) -> Any:
        raw = await request.body()
        if not raw:
            return {}
        try:
            return json.loads(raw)
        except ValueError:
            raise ApiError(400, "bad_json", "request body is not valid JSON")

    @app.exception_handler(ApiError)
    async def _api_error(request: Request, exc: ApiError) -> JSONResponse:
        return _error_response(exc.status, exc.code, exc.message, exc.detail)

    @app.exception_handler(Exception)
    async def _any_error(request: Request, exc: Exception) -> JSONResponse:
        if isinstance(exc, ProviderError):
            detail = getattr(exc, "violations", None)
            if isinstance(exc, ConsentRequired):
                detail = exc.required
            return _error_response(exc.http_status, exc.code, str(exc), detail)
        for etype, status, code in _ERROR_MAP:
            if isinstance(exc, etype):
                detail = getattr(exc, "issues", None) or getattr(exc, "missing", None) \
                    or getattr(exc, "required", None)
                return _error_response(status, code, str(exc), detail)
        logger.exception("unhandled error on %s %s", request.method, request.url.path)
        return _error_response(500, "internal_error", str(exc))

    # -- misc -----------------------------------------------------------------------

    _policy("GET", "/healthz", "open")

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok", "version": __version__}

    _policy("GET", "/", "open (service description)")

    @app.get("/")
    def service_description() -> dict:
        return {
            "service": "flowline",
            "version": __version__,
            "base_url": platform.config.base_url,
            "flows_publish_scope": platform.flows.publish_scope,
            "flows_manage_scope": platform.flows.manage_scope,
            "providers": {name: platform.provider_url(name) for name in platform.providers},
        }

    _policy("GET", "/whoami", "token")

    @app.get("/whoami")
    def whoami(request: Request) -> dict:
        rate_limit(request)
        return require_active(request)

    # -- auth -------------------------------------------------------------------------

    _policy("POST", "/auth/token", "open (credential exchange)")

    @app.post("/auth/token")
    async def auth_token(request: Request) -> dict:
        rate_limit(request)
        doc = await body_json(request)
        if "refresh_token" in doc:
            return authz.refresh_token(doc["refresh_token"])
        return authz.login(doc.get("username", ""), doc.get("secret", ""),
                           doc.get("scopes", []), consent=doc.get("consent"),
                           lifetime=doc.get("lifetime"))

    _policy("POST", "/auth/introspect", "open (opaque-token lookup)")

    @app.post("/auth/introspect")
    async def auth_introspect(request: Request) -> dict:
        rate_limit(request)
        doc = await body_json(request)
        return authz.introspect(doc.get("token"))

    _policy("POST", "/auth/consents", "token")

    @app.post("/auth/consents")
    async def auth_consents(request: Request) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        authz.grant_consent(intro["sub"], doc.get("scopes", []))
        return {"subject": intro["sub"], "consented": sorted(authz.standing_consents(intro["sub"]))}

    _policy("POST", "/auth/dependent", "token")

    @app.post("/auth/dependent")
    async def auth_dependent(request: Request) -> dict:
        rate_limit(request)
        require_active(request)
        doc = await body_json(request)
        return authz.dependent_token(token_of(request), doc["scope"])

    # -- flows ---------------------------------------------------------------------------

    _policy("POST", "/flows", "token + flows publish scope")

    @app.post("/flows", status_code=201)
    async def publish_flow(request: Request) -> dict:
        rate_limit(request)
        intro = require_active(request)
        if platform.flows.publish_scope not in intro.get("scopes", []):
            raise ApiError(403, "insufficient_scopes",
                           f"publishing requires scope {platform.flows.publish_scope}")
        doc = await body_json(request)
        return platform.flows.publish_flow(
            intro, definition=doc.get("definition"), input_schema=doc.get("input_schema"),
            title=doc.get("title", ""), description=doc.get("description", ""),
            keywords=doc.get("keywords"), visible_to=doc.get("visible_to"),
            runnable_by=doc.get("runnable_by"), administered_by=doc.get("administered_by"))

    _policy("GET", "/flows", "open (public flows) / token (visible flows)")

    @app.get("/flows")
    def list_flows(request: Request, keyword: Optional[str] = None, role: Optional[str] = None,
                   cursor: Optional[str] = None, limit: int = 50) -> dict:
        rate_limit(request)
        return platform.flows.list_flows(intro_of(request), keyword=keyword, role=role,
                                         cursor=cursor, limit=min(limit, 1000))

    _policy("GET", "/flows/{flow_id}", "resource (Visible To; public flows anonymous)")

    @app.get("/flows/{flow_id}")
    def get_flow(request: Request, flow_id: str) -> dict:
        rate_limit(request)
        return platform.flows.get_flow(flow_id, intro_of(request))

    _policy("PUT", "/flows/{flow_id}", "resource (Administered By)")

    @app.put("/flows/{flow_id}")
    async def update_flow(request: Request, flow_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        return platform.flows.update_flow(
            flow_id, intro, definition=doc.get("definition"), input_schema=doc.get("input_schema"),
            title=doc.get("title"), description=doc.get("description"), keywords=doc.get("keywords"),
            visible_to=doc.get("visible_to"), runnable_by=doc.get("runnable_by"),
            administered_by=doc.get("administered_by"), owner=doc.get("owner"))

    _policy("DELETE", "/flows/{flow_id}", "resource (Owner only)")

    @app.delete("/flows/{flow_id}", status_code=204)
    def delete_flow(request: Request, flow_id: str) -> Response:
        rate_limit(request)
        intro = require_active(request)
        platform.flows.delete_flow(flow_id, intro)
        return Response(status_code=204)

    # Flows are action providers: run/status/cancel/release per flow.

    _policy("POST", "/flows/{flow_id}/run", "resource (Runnable By + flow run scope)")

    @app.post("/flows/{flow_id}/run", status_code=202)
    async def run_flow(request: Request, flow_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        option_keys = {"request_id", "body", "label", "tags", "role_tokens",
                       "monitor_by", "manage_by"}
        if not (isinstance(doc, dict) and "body" in doc):
            doc = {"body": doc}
        unknown = set(doc) - option_keys if isinstance(doc, dict) else set()
        if unknown:
            raise ApiError(400, "bad_request", f"unknown run option(s): {sorted(unknown)}")
        run = platform.flows.start_run(
            flow_id, intro, token_of(request), doc.get("body"),
            label=doc.get("label"), tags=doc.get("tags"),
            monitor_by=doc.get("monitor_by"), manage_by=doc.get("manage_by"),
            role_tokens=doc.get("role_tokens"),
            request_id=doc.get("request_id") or new_id())
        endpoint = platform.flows.endpoint_for(flow_id)
        action_doc = endpoint.action_doc(run) if endpoint else {}
        action_doc["run_id"] = run["run_id"]
        return action_doc

    _policy("GET", "/flows/{flow_id}/{action_id}/status", "resource (run Monitor)")

    @app.get("/flows/{flow_id}/{action_id}/status")
    def flow_action_status(request: Request, flow_id: str, action_id: str) -> dict:
        rate_limit(request)
        endpoint = platform.flows.endpoint_for(flow_id)
        if endpoint is None:
            raise UnknownFlow(flow_id)
        return endpoint.status(token_of(request), action_id)

    _policy("POST", "/flows/{flow_id}/{action_id}/cancel", "resource (run Manager)")

    @app.post("/flows/{flow_id}/{action_id}/cancel")
    def flow_action_cancel(request: Request, flow_id: str, action_id: str) -> dict:
        rate_limit(request)
        endpoint = platform.flows.endpoint_for(flow_id)
        if endpoint is None:
            raise UnknownFlow(flow_id)
        return endpoint.cancel(token_of(request), action_id)

    _policy("POST", "/flows/{flow_id}/{action_id}/release", "resource (run Manager)")

    @app.post("/flows/{flow_id}/{action_id}/release")
    def flow_action_release(request: Request, flow_id: str, action_id: str) -> dict:
        rate_limit(request)
        endpoint = platform.flows.endpoint_for(flow_id)
        if endpoint is None:
            raise UnknownFlow(flow_id)
        return endpoint.release(token_of(request), action_id)

    # -- runs ------------------------------------------------------------------------------

    _policy("GET", "/runs", "token (creator/monitor/manager visibility)")

    @app.get("/runs")
    def list_runs(request: Request, status: Optional[str] = None, tag: Optional[str] = None,
                  label: Optional[str] = None, flow_id: Optional[str] = None,
                  cursor: Optional[str] = None, limit: int = 50) -> dict:
        rate_limit(request)
        intro = require_active(request)
        return platform.engine.list_runs(intro, status=status, tag=tag, label=label,
                                         flow_id=flow_id, cursor=cursor, limit=min(limit, 1000))

    _policy("GET", "/runs/{run_id}", "resource (run Monitor or flow admin)")

    @app.get("/runs/{run_id}")
    def get_run(request: Request, run_id: str, include: Optional[str] = None) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = platform.engine.get_run(run_id, intro)
        if include == "events":
            doc["events"] = platform.engine.run_events(run_id)
        return doc

    _policy("GET", "/runs/{run_id}/log", "resource (run Monitor)")

    @app.get("/runs/{run_id}/log")
    def run_log(request: Request, run_id: str) -> PlainTextResponse:
        rate_limit(request)
        intro = require_active(request)
        events = platform.engine.run_events(run_id, intro)
        lines = "\n".join(
            json.dumps({"seq": e["seq"], "ts": e["ts"], "kind": e["kind"],
                        "state": e["state"], "detail": e["detail"]}, sort_keys=True)
            for e in events)
        return PlainTextResponse(lines + ("\n" if lines else ""),
                                 media_type="application/x-ndjson")

    _policy("POST", "/runs/{run_id}/cancel", "resource (run Manager)")

    @app.post("/runs/{run_id}/cancel")
    def cancel_run(request: Request, run_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        return platform.engine.cancel_run(run_id, intro)

    _policy("POST", "/runs/{run_id}/resume", "resource (run Manager)")

    @app.post("/runs/{run_id}/resume")
    async def resume_run(request: Request, run_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        return platform.engine.resume_run(run_id, intro, role_tokens=doc.get("role_tokens"),
                                          token=doc.get("token") or token_of(request))

    # -- action providers --------------------------------------------------------------------

    _policy("GET", "/providers", "open (introspection)")

    @app.get("/providers")
    def list_providers(request: Request) -> dict:
        rate_limit(request)
        return {name: {**provider.introspect(), "url": platform.provider_url(name)}
                for name, provider in platform.providers.items()}

    _policy("GET", "/providers/{name}", "open (introspection)")

    @app.get("/providers/{name}")
    def provider_introspect(request: Request, name: str) -> dict:
        rate_limit(request)
        provider = platform.host.get(name)
        return {**provider.introspect(), "url": platform.provider_url(name)}

    _policy("POST", "/providers/{name}/run", "token + provider scope")

    @app.post("/providers/{name}/run", status_code=202)
    async def provider_run(request: Request, name: str) -> dict:
        rate_limit(request)
        provider = platform.host.get(name)
        doc = await body_json(request)
        if "request_id" not in doc or "body" not in doc:
            raise ApiError(400, "bad_request", "run needs {request_id, body}")
        return provider.run(token_of(request), doc["request_id"], doc["body"],
                            monitor_by=doc.get("monitor_by"), manage_by=doc.get("manage_by"))

    _policy("GET", "/providers/{name}/{action_id}/status", "resource (creator/monitor/manager)")

    @app.get("/providers/{name}/{action_id}/status")
    def provider_status(request: Request, name: str, action_id: str) -> dict:
        rate_limit(request)
        return platform.host.get(name).status(token_of(request), action_id)

    _policy("POST", "/providers/{name}/{action_id}/cancel", "resource (creator/manager)")

    @app.post("/providers/{name}/{action_id}/cancel")
    def provider_cancel(request: Request, name: str, action_id: str) -> dict:
        rate_limit(request)
        return platform.host.get(name).cancel(token_of(request), action_id)

    _policy("POST", "/providers/{name}/{action_id}/release", "resource (creator/manager)")

    @app.post("/providers/{name}/{action_id}/release")
    def provider_release(request: Request, name: str, action_id: str) -> dict:
        rate_limit(request)
        return platform.host.get(name).release(token_of(request), action_id)

    _policy("POST", "/providers/user_selection/{action_id}/respond", "resource (creator/manager)")

    @app.post("/providers/user_selection/{action_id}/respond")
    async def selection_respond(request: Request, action_id: str) -> dict:
        rate_limit(request)
        provider = platform.host.get("user_selection")
        assert isinstance(provider, UserSelectionProvider)
        doc = await body_json(request)
        return provider.respond(token_of(request), action_id, doc.get("selection"))

    _policy("GET", "/selections/pending", "token")

    @app.get("/selections/pending")
    def pending_selections(request: Request) -> dict:
        rate_limit(request)
        require_active(request)
        provider = platform.host.get("user_selection")
        assert isinstance(provider, UserSelectionProvider)
        return {"pending": provider.pending_for(token_of(request))}

    _policy("GET", "/search/query", "open (embedded index query)")

    @app.get("/search/query")
    def search_query(request: Request, q: str = "") -> dict:
        rate_limit(request)
        provider = platform.host.get("search")
        assert isinstance(provider, SearchIndexProvider)
        return {"results": provider.query(q)}

    _policy("GET", "/identifiers/{prefix}/{suffix}", "open (identifier resolution)")

    @app.get("/identifiers/{prefix}/{suffix}")
    def resolve_identifier(request: Request, prefix: str, suffix: str) -> dict:
        rate_limit(request)
        provider = platform.host.get("mint_id")
        assert isinstance(provider, MintIdProvider)
        doc = provider.resolve(f"{prefix}/{suffix}")
        if doc is None:
            raise ApiError(404, "unknown_identifier", f"{prefix}/{suffix} is not minted here")
        return doc

    # -- queues ----------------------------------------------------------------------------

    _policy("POST", "/queues", "token")

    @app.post("/queues", status_code=201)
    async def create_queue(request: Request) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        return platform.queues.create_queue(
            intro, label=doc.get("label"), visibility_timeout=doc.get("visibility_timeout"),
            senders=doc.get("senders"), receivers=doc.get("receivers"),
            admins=doc.get("admins"), client_token=doc.get("client_token"))

    _policy("GET", "/queues/{queue_id}", "resource (any queue role)")

    @app.get("/queues/{queue_id}")
    def get_queue(request: Request, queue_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = platform.queues.get_queue(queue_id, intro)
        doc["depth"] = platform.queues.depth(queue_id)
        return doc

    _policy("PUT", "/queues/{queue_id}", "resource (Administrator)")

    @app.put("/queues/{queue_id}")
    async def update_queue(request: Request, queue_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        return platform.queues.update_queue(
            queue_id, intro, visibility_timeout=doc.get("visibility_timeout"),
            senders=doc.get("senders"), receivers=doc.get("receivers"), admins=doc.get("admins"))

    _policy("DELETE", "/queues/{queue_id}", "resource (Administrator)")

    @app.delete("/queues/{queue_id}", status_code=204)
    def delete_queue(request: Request, queue_id: str) -> Response:
        rate_limit(request)
        intro = require_active(request)
        platform.queues.delete_queue(queue_id, intro)
        return Response(status_code=204)

    _policy("POST", "/queues/{queue_id}/messages", "resource (Sender)")

    @app.post("/queues/{queue_id}/messages", status_code=201)
    async def send_message(request: Request, queue_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        payload = await body_json(request)
        message_id = platform.queues.send(queue_id, intro, payload)
        return {"message_id": message_id}

    _policy("GET", "/queues/{queue_id}/messages", "resource (Receiver)")

    @app.get("/queues/{queue_id}/messages")
    def receive_messages(request: Request, queue_id: str, max: int = 10) -> dict:
        rate_limit(request)
        intro = require_active(request)
        return {"messages": platform.queues.receive(queue_id, intro, max_n=max)}

    _policy("DELETE", "/queues/{queue_id}/messages/{message_id}", "resource (Receiver + receipt)")

    @app.delete("/queues/{queue_id}/messages/{message_id}")
    def ack_message(request: Request, queue_id: str, message_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        receipt = request.headers.get("x-flowline-receipt", "")
        platform.queues.ack(queue_id, intro, message_id, receipt)
        return {"acknowledged": message_id}

    _policy("POST", "/queues/{queue_id}/messages/{message_id}/return", "resource (Receiver)")

    @app.post("/queues/{queue_id}/messages/{message_id}/return")
    def return_message(request: Request, queue_id: str, message_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        receipt = request.headers.get("x-flowline-receipt") or None
        platform.queues.return_message(queue_id, intro, message_id, receipt)
        return {"returned": message_id}

    # -- triggers ---------------------------------------------------------------------------

    _policy("POST", "/triggers", "token")

    @app.post("/triggers", status_code=201)
    async def create_trigger(request: Request) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        return platform.triggers.create_trigger(
            intro, queue_id=doc.get("queue_id", ""), action_url=doc.get("action_url", ""),
            predicate=doc.get("predicate", "true"), template=doc.get("template"))

    _policy("GET", "/triggers/{trigger_id}", "token (creator)")

    @app.get("/triggers/{trigger_id}")
    def get_trigger(request: Request, trigger_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = platform.triggers.trigger_doc(trigger_id)
        if doc["creator"] not in platform.authz.expand(intro["sub"]):
            raise ApiError(403, "unauthorized", "only the trigger's creator may view it")
        return doc

    _policy("POST", "/triggers/{trigger_id}/enable", "token + queue receive scope + action scope")

    @app.post("/triggers/{trigger_id}/enable")
    async def enable_trigger(request: Request, trigger_id: str) -> dict:
        rate_limit(request)
        require_active(request)
        doc = await body_json(request)
        token = doc.get("token") or token_of(request)
        return platform.triggers.enable_trigger(trigger_id, token)

    _policy("POST", "/triggers/{trigger_id}/disable", "token (creator)")

    @app.post("/triggers/{trigger_id}/disable")
    def disable_trigger(request: Request, trigger_id: str) -> dict:
        rate_limit(request)
        require_active(request)
        return platform.triggers.disable_trigger(trigger_id, reason="disabled by user")

    # -- timers -----------------------------------------------------------------------------

    _policy("POST", "/timers", "token + action scope")

    @app.post("/timers", status_code=201)
    async def create_timer(request: Request) -> dict:
        rate_limit(request)
        intro = require_active(request)
        doc = await body_json(request)
        start_at = doc.get("start_at")
        end_at = doc.get("end_at")
        return platform.timers.create_timer(
            intro, token_of(request), action_url=doc.get("action_url", ""),
            interval=doc.get("interval", 0),
            start_at=parse_iso(start_at) if isinstance(start_at, str) else start_at,
            count=doc.get("count"),
            end_at=parse_iso(end_at) if isinstance(end_at, str) else end_at,
            body=doc.get("body"), coalesce=bool(doc.get("coalesce", False)))

    _policy("GET", "/timers", "token (creator)")

    @app.get("/timers")
    def list_timers(request: Request) -> dict:
        rate_limit(request)
        intro = require_active(request)
        return {"timers": platform.timers.list_timers(intro)}

    _policy("GET", "/timers/{timer_id}", "token (creator)")

    @app.get("/timers/{timer_id}")
    def get_timer(request: Request, timer_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        return platform.timers.get_timer(timer_id, intro)

    _policy("GET", "/timers/{timer_id}/firings", "token (creator)")

    @app.get("/timers/{timer_id}/firings")
    def timer_firings(request: Request, timer_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        platform.timers.get_timer(timer_id, intro)
        return {"firings": platform.timers.firings(timer_id)}

    _policy("DELETE", "/timers/{timer_id}", "token (creator)")

    @app.delete("/timers/{timer_id}", status_code=204)
    def delete_timer(request: Request, timer_id: str) -> Response:
        rate_limit(request)
        intro = require_active(request)
        platform.timers.delete_timer(timer_id, intro)
        return Response(status_code=204)

    _policy("POST", "/timers/{timer_id}/pause", "token (creator)")

    @app.post("/timers/{timer_id}/pause")
    def pause_timer(request: Request, timer_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        return platform.timers.pause_timer(timer_id, intro)

    _policy("POST", "/timers/{timer_id}/resume", "token (creator)")

    @app.post("/timers/{timer_id}/resume")
    def resume_timer(request: Request, timer_id: str) -> dict:
        rate_limit(request)
        intro = require_active(request)
        return platform.timers.resume_timer(timer_id, intro)

    # -- console assets -------------------------------------------------------------------

    console_dir = os.environ.get("FLOWLINE_CONSOLE_DIR")
    if not console_dir:
        here = os.path.dirname(os.path.abspath(__file__))
        for candidate in (os.path.join(here, "console"),
                          os.path.join(os.getcwd(), "frontend", "dist")):
            if os.path.isdir(candidate):
                console_dir = candidate
                break
    if console_dir and os.path.isdir(console_dir):
        app.mount("/console", StaticFiles(directory=console_dir, html=True), name="console")

    return app
