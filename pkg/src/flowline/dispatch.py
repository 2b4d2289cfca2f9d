"""Uniform action invocation by URL.

Action URLs under the deployment's own base URL dispatch in process, so
flows keep running even when no HTTP listener is up; anything else is
spoken to over HTTP with the same five-operation contract.
"""

from __future__ import annotations

import logging
from typing import Any, Callable, Optional
from urllib.parse import urlsplit

import httpx

from .actions.protocol import (
    InvalidRequest,
    NotTerminal,
    ProviderError,
    ProviderUnavailable,
    SchemaViolation,
    Unauthorized,
    UnknownAction,
)

logger = logging.getLogger(__name__)

__all__ = ["Dispatcher"]


class Dispatcher:
    def __init__(self, base_url: str, http_timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self._routes: dict[str, Any] = {}
        self._prefixes: list[tuple[str, Callable[[str], Optional[Any]]]] = []
        self._http = httpx.Client(timeout=http_timeout)

    def register(self, path: str, endpoint: Any) -> str:
        """Mount an endpoint at a path under the base URL; returns its URL."""
        path = "/" + path.strip("/")
        self._routes[path] = endpoint
        return self.base_url + path

    def register_prefix(self, prefix: str, lookup: Callable[[str], Optional[Any]]) -> None:
        """Resolve '/prefix/<tail>' through a lookup of the tail segment."""
        prefix = "/" + prefix.strip("/") + "/"
        self._prefixes.append((prefix, lookup))

    def url_for(self, path: str) -> str:
        return self.base_url + "/" + path.strip("/")

    def resolve_local(self, url: str) -> Optional[Any]:
        if not url.startswith(self.base_url + "/") and url.rstrip("/") != self.base_url:
            return None
        path = "/" + url[len(self.base_url):].strip("/")
        if path in self._routes:
            return self._routes[path]
        for prefix, lookup in self._prefixes:
            if path.startswith(prefix):
                tail = path[len(prefix):].strip("/")
                if tail and "/" not in tail:
                    return lookup(tail)
        return None

    # -- operations ------------------------------------------------------------

    def introspect(self, url: str) -> dict:
        endpoint = self.resolve_local(url)
        if endpoint is not None:
            return endpoint.introspect()
        return self._remote("GET", url.rstrip("/") + "/", None)

    def run(self, url: str, token: Optional[str], request_id: str, body: Any,
            monitor_by: Optional[list] = None, manage_by: Optional[list] = None) -> dict:
        endpoint = self.resolve_local(url)
        if endpoint is not None:
            return endpoint.run(token, request_id, body, monitor_by=monitor_by, manage_by=manage_by)
        payload = {"request_id": request_id, "body": body,
                   "monitor_by": monitor_by or [], "manage_by": manage_by or []}
        return self._remote("POST", url.rstrip("/") + "/run", token, json=payload)

    def status(self, url: str, token: Optional[str], action_id: str) -> dict:
        endpoint = self.resolve_local(url)
        if endpoint is not None:
            return endpoint.status(token, action_id)
        return self._remote("GET", f"{url.rstrip('/')}/{action_id}/status", token)

    def cancel(self, url: str, token: Optional[str], action_id: str) -> dict:
        endpoint = self.resolve_local(url)
        if endpoint is not None:
            return endpoint.cancel(token, action_id)
        return self._remote("POST", f"{url.rstrip('/')}/{action_id}/cancel", token)

    def release(self, url: str, token: Optional[str], action_id: str) -> dict:
        endpoint = self.resolve_local(url)
        if endpoint is not None:
            return endpoint.release(token, action_id)
        return self._remote("POST", f"{url.rstrip('/')}/{action_id}/release", token)

    def close(self) -> None:
        self._http.close()

    # -- HTTP ----------------------------------------------------------------

    def _remote(self, method: str, url: str, token: Optional[str], json: Any = None) -> dict:
        if urlsplit(url).scheme not in ("http", "https"):
            raise InvalidRequest(f"not an absolute action URL: {url!r}")
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        try:
            response = self._http.request(method, url, headers=headers, json=json)
        except httpx.HTTPError as exc:
            raise ProviderUnavailable(f"{url}: {exc}") from exc
        if response.status_code >= 400:
            raise self._error(response)
        return response.json()

    @staticmethod
    def _error(response: httpx.Response) -> ProviderError:
        try:
            doc = response.json()
            message = doc.get("message") or doc.get("detail") or response.text
            code = doc.get("code", "")
        except ValueError:
            message, code = response.text, ""
        status = response.status_code
        if status in (401, 403):
            return Unauthorized(message)
        if status == 404:
            return UnknownAction(message)
        if status == 409:
            return NotTerminal(message)
        if status == 400:
            if code == "schema_violation":
                return SchemaViolation([message])
            return InvalidRequest(message)
        if status in (502, 503, 504):
            return ProviderUnavailable(message)
        return ProviderError(f"HTTP {status}: {message}")
