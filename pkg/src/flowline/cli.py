"""Command-line client and server launcher."""

from __future__ import annotations

import json
import os
import sys
from typing import Any, Optional

import click
import httpx

DEFAULT_SERVER = "http://127.0.0.1:4330"
CREDENTIALS_PATH = os.path.expanduser("~/.config/flowline/credentials.json")


def _credentials_file() -> str:
    return os.environ.get("FLOWLINE_CREDENTIALS", CREDENTIALS_PATH)


def _load_token() -> Optional[str]:
    if os.environ.get("FLOWLINE_TOKEN"):
        return os.environ["FLOWLINE_TOKEN"]
    try:
        with open(_credentials_file(), "r", encoding="utf-8") as fh:
            return json.load(fh).get("access_token")
    except (OSError, ValueError):
        return None


def _save_token(doc: dict) -> None:
    path = _credentials_file()
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
    os.chmod(path, 0o600)


class Client:
    def __init__(self, server: str, token: Optional[str]):
        self.server = server.rstrip("/")
        self.token = token
        self.http = httpx.Client(timeout=30.0)

    def request(self, method: str, path: str, *, json_body: Any = None,
                params: Optional[dict] = None, headers: Optional[dict] = None) -> Any:
        hdrs = dict(headers or {})
        if self.token:
            hdrs["Authorization"] = f"Bearer {self.token}"
        response = self.http.request(method, self.server + path, json=json_body,
                                     params=params, headers=hdrs)
        if response.status_code == 204:
            return None
        body: Any
        try:
            body = response.json()
        except ValueError:
            body = response.text
        if response.status_code >= 400:
            message = body.get("message", body) if isinstance(body, dict) else body
            raise click.ClickException(f"{response.status_code}: {message}")
        return body


def _emit(doc: Any) -> None:
    if isinstance(doc, str):
        click.echo(doc.rstrip("\n"))
    else:
        click.echo(json.dumps(doc, indent=2, sort_keys=True))


@click.group()
@click.option("--server", envvar="FLOWLINE_SERVER", default=DEFAULT_SERVER,
              show_default=True, help="Gateway base URL.")
@click.option("--token", envvar=None, default=None, help="Bearer token (overrides login).")
@click.pass_context
def main(ctx: click.Context, server: str, token: Optional[str]) -> None:
    """Work with a flowline deployment: flows, runs, queues, triggers, timers."""
    ctx.obj = Client(server, token or _load_token())


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
def serve(config_path: Optional[str], host: Optional[str], port: Optional[int]) -> None:
    """Run the gateway and every backing service in one process."""
    import uvicorn

    from .config import load_config
    from .gateway import create_app
    from .service import Platform

    config = load_config(config_path)
    if host:
        config.listen_host = host
    if port:
        config.listen_port = port
    platform = Platform(config).start()
    app = create_app(platform)
    try:
        uvicorn.run(app, host=config.listen_host, port=config.listen_port, log_level="warning")
    finally:
        platform.stop()


@main.command()
@click.option("--username", required=True)
@click.option("--secret", prompt=True, hide_input=True, envvar="FLOWLINE_SECRET")
@click.option("--scope", "scopes", multiple=True, help="Scope URL to request (repeatable).")
@click.option("--consent-all", is_flag=True, help="Consent to every dependent scope.")
@click.pass_obj
def login(client: Client, username: str, secret: str, scopes: tuple[str, ...],
          consent_all: bool) -> None:
    """Obtain a token and store it for later commands."""
    doc = client.request("POST", "/auth/token", json_body={
        "username": username, "secret": secret, "scopes": list(scopes),
        "consent": "all" if consent_all else None})
    _save_token(doc)
    _emit({"subject": doc["subject"], "scopes": doc["scopes"], "expires_at": doc["expires_at"],
           "stored": _credentials_file()})


@main.command()
@click.pass_obj
def whoami(client: Client) -> None:
    """Show the identity behind the stored token."""
    _emit(client.request("GET", "/whoami"))


# -- flows ------------------------------------------------------------------------

@main.group()
def flow() -> None:
    """Publish, discover, and run flows."""


@flow.command("publish")
@click.option("--definition", type=click.File("r"), required=True)
@click.option("--schema", "schema_file", type=click.File("r"), default=None)
@click.option("--title", default="")
@click.option("--description", default="")
@click.option("--keyword", "keywords", multiple=True)
@click.option("--visible-to", multiple=True)
@click.option("--runnable-by", multiple=True)
@click.option("--administered-by", multiple=True)
@click.pass_obj
def flow_publish(client: Client, definition, schema_file, title: str, description: str,
                 keywords, visible_to, runnable_by, administered_by) -> None:
    doc = {
        "definition": json.load(definition),
        "input_schema": json.load(schema_file) if schema_file else None,
        "title": title, "description": description, "keywords": list(keywords),
        "visible_to": list(visible_to), "runnable_by": list(runnable_by),
        "administered_by": list(administered_by),
    }
    _emit(client.request("POST", "/flows", json_body=doc))


@flow.command("list")
@click.option("--keyword", default=None)
@click.option("--role", default=None)
@click.pass_obj
def flow_list(client: Client, keyword: Optional[str], role: Optional[str]) -> None:
    _emit(client.request("GET", "/flows", params={k: v for k, v in
                                                  (("keyword", keyword), ("role", role)) if v}))


@flow.command("show")
@click.argument("flow_id")
@click.pass_obj
def flow_show(client: Client, flow_id: str) -> None:
    _emit(client.request("GET", f"/flows/{flow_id}"))


@flow.command("run")
@click.argument("flow_id")
@click.option("--input", "input_file", type=click.File("r"), default=None,
              help="JSON input document (defaults to stdin if piped, else {}).")
@click.option("--label", default=None)
@click.option("--tag", "tags", multiple=True)
@click.option("--monitor-by", multiple=True)
@click.option("--manage-by", multiple=True)
@click.option("--role-token", "role_tokens", multiple=True,
              help="ROLE=TOKEN binding for flow states that run as a role.")
@click.option("--request-id", default=None)
@click.pass_obj
def flow_run(client: Client, flow_id: str, input_file, label, tags, monitor_by,
             manage_by, role_tokens, request_id) -> None:
    if input_file is not None:
        body = json.load(input_file)
    elif not sys.stdin.isatty():
        text = sys.stdin.read().strip()
        body = json.loads(text) if text else {}
    else:
        body = {}
    roles = {}
    for binding in role_tokens:
        role, _, value = binding.partition("=")
        roles[role] = value
    doc = {"body": body, "label": label, "tags": list(tags),
           "monitor_by": list(monitor_by), "manage_by": list(manage_by)}
    if roles:
        doc["role_tokens"] = roles
    if request_id:
        doc["request_id"] = request_id
    _emit(client.request("POST", f"/flows/{flow_id}/run", json_body=doc))


@flow.command("status")
@click.argument("run_id")
@click.pass_obj
def flow_status(client: Client, run_id: str) -> None:
    _emit(client.request("GET", f"/runs/{run_id}"))


@flow.command("cancel")
@click.argument("run_id")
@click.pass_obj
def flow_cancel(client: Client, run_id: str) -> None:
    _emit(client.request("POST", f"/runs/{run_id}/cancel"))


@flow.command("log")
@click.argument("run_id")
@click.pass_obj
def flow_log(client: Client, run_id: str) -> None:
    """Print the run's event journal (newline-delimited JSON)."""
    _emit(client.request("GET", f"/runs/{run_id}/log"))


@flow.command("runs")
@click.option("--status", default=None)
@click.option("--tag", default=None)
@click.option("--label", default=None)
@click.pass_obj
def flow_runs(client: Client, status, tag, label) -> None:
    params = {k: v for k, v in (("status", status), ("tag", tag), ("label", label)) if v}
    _emit(client.request("GET", "/runs", params=params))


# -- queues ------------------------------------------------------------------------

@main.group()
def queue() -> None:
    """Provision queues and move messages."""


@queue.command("create")
@click.option("--label", default=None)
@click.option("--visibility-timeout", type=float, default=None)
@click.option("--sender", "senders", multiple=True)
@click.option("--receiver", "receivers", multiple=True)
@click.pass_obj
def queue_create(client: Client, label, visibility_timeout, senders, receivers) -> None:
    _emit(client.request("POST", "/queues", json_body={
        "label": label, "visibility_timeout": visibility_timeout,
        "senders": list(senders), "receivers": list(receivers)}))


@queue.command("send")
@click.argument("queue_id")
@click.argument("payload")
@click.pass_obj
def queue_send(client: Client, queue_id: str, payload: str) -> None:
    _emit(client.request("POST", f"/queues/{queue_id}/messages", json_body=json.loads(payload)))


@queue.command("recv")
@click.argument("queue_id")
@click.option("--max", "max_n", type=int, default=10)
@click.pass_obj
def queue_recv(client: Client, queue_id: str, max_n: int) -> None:
    _emit(client.request("GET", f"/queues/{queue_id}/messages", params={"max": max_n}))


@queue.command("ack")
@click.argument("queue_id")
@click.argument("message_id")
@click.argument("receipt")
@click.pass_obj
def queue_ack(client: Client, queue_id: str, message_id: str, receipt: str) -> None:
    _emit(client.request("DELETE", f"/queues/{queue_id}/messages/{message_id}",
                         headers={"x-flowline-receipt": receipt}))


# -- triggers -----------------------------------------------------------------------

@main.group()
def trigger() -> None:
    """Bind queues to actions through predicates and templates."""


@trigger.command("create")
@click.option("--queue", "queue_id", required=True)
@click.option("--action-url", required=True)
@click.option("--predicate", default="true", show_default=True)
@click.option("--param", "params", multiple=True,
              help="NAME=EXPRESSION template entry (repeatable).")
@click.pass_obj
def trigger_create(client: Client, queue_id: str, action_url: str, predicate: str,
                   params: tuple[str, ...]) -> None:
    template = {}
    for entry in params:
        name, _, expr = entry.partition("=")
        template[name] = expr
    _emit(client.request("POST", "/triggers", json_body={
        "queue_id": queue_id, "action_url": action_url,
        "predicate": predicate, "template": template}))


@trigger.command("enable")
@click.argument("trigger_id")
@click.pass_obj
def trigger_enable(client: Client, trigger_id: str) -> None:
    _emit(client.request("POST", f"/triggers/{trigger_id}/enable"))


@trigger.command("disable")
@click.argument("trigger_id")
@click.pass_obj
def trigger_disable(client: Client, trigger_id: str) -> None:
    _emit(client.request("POST", f"/triggers/{trigger_id}/disable"))


@trigger.command("show")
@click.argument("trigger_id")
@click.pass_obj
def trigger_show(client: Client, trigger_id: str) -> None:
    _emit(client.request("GET", f"/triggers/{trigger_id}"))


@trigger.command("grammar")
def trigger_grammar() -> None:
    """Print the predicate/template expression grammar."""
    from . import exprs

    _emit(exprs.__doc__ or "")


# -- timers --------------------------------------------------------------------------

@main.group()
def timer() -> None:
    """Schedule recurring action invocations."""


@timer.command("create")
@click.option("--action-url", required=True)
@click.option("--interval", type=float, required=True)
@click.option("--start-at", default=None, help="RFC 3339 start time (default: now).")
@click.option("--count", type=int, default=None)
@click.option("--end-at", default=None, help="RFC 3339 end time.")
@click.option("--body", default="{}", help="JSON input for each invocation.")
@click.option("--coalesce", is_flag=True, help="Collapse missed firings to one on recovery.")
@click.pass_obj
def timer_create(client: Client, action_url, interval, start_at, count, end_at,
                 body, coalesce) -> None:
    _emit(client.request("POST", "/timers", json_body={
        "action_url": action_url, "interval": interval, "start_at": start_at,
        "count": count, "end_at": end_at, "body": json.loads(body), "coalesce": coalesce}))


@timer.command("list")
@click.pass_obj
def timer_list(client: Client) -> None:
    _emit(client.request("GET", "/timers"))


@timer.command("show")
@click.argument("timer_id")
@click.pass_obj
def timer_show(client: Client, timer_id: str) -> None:
    _emit(client.request("GET", f"/timers/{timer_id}"))


@timer.command("pause")
@click.argument("timer_id")
@click.pass_obj
def timer_pause(client: Client, timer_id: str) -> None:
    _emit(client.request("POST", f"/timers/{timer_id}/pause"))


@timer.command("resume")
@click.argument("timer_id")
@click.pass_obj
def timer_resume(client: Client, timer_id: str) -> None:
    _emit(client.request("POST", f"/timers/{timer_id}/resume"))


# -- user selections -------------------------------------------------------------------

@main.group()
def selection() -> None:
    """Answer pending user-selection actions."""


@selection.command("list")
@click.pass_obj
def selection_list(client: Client) -> None:
    _emit(client.request("GET", "/selections/pending"))


@selection.command("respond")
@click.argument("action_id")
@click.argument("choice")
@click.pass_obj
def selection_respond(client: Client, action_id: str, choice: str) -> None:
    _emit(client.request("POST", f"/providers/user_selection/{action_id}/respond",
                         json_body={"selection": choice}))


if __name__ == "__main__":
    main()
