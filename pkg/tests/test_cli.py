import json

import pytest
from click.testing import CliRunner

from conftest import DEFAULT_SECRET, wait_until
from flowline.cli import main


@pytest.fixture
def cli(live_server, tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWLINE_SERVER", live_server.base_url)
    monkeypatch.setenv("FLOWLINE_CREDENTIALS", str(tmp_path / "creds.json"))
    runner = CliRunner()

    def invoke(*args, expect=0, **kwargs):
        result = runner.invoke(main, list(args), catch_exceptions=False, **kwargs)
        assert result.exit_code == expect, result.output
        return result.output

    invoke.server = live_server
    return invoke


def jout(text):
    return json.loads(text)


def cli_login(cli, scopes=(), username="alice"):
    args = ["login", "--username", username, "--secret", DEFAULT_SECRET, "--consent-all"]
    for scope in scopes:
        args += ["--scope", scope]
    return jout(cli(*args))


class TestCliBasics:
    def test_login_and_whoami(self, cli):
        out = cli_login(cli)
        assert out["subject"]
        me = jout(cli("whoami"))
        assert me["username"] == "alice"

    def test_bad_login_fails(self, cli):
        result = CliRunner().invoke(
            main, ["login", "--username", "alice", "--secret", "wrong"])
        assert result.exit_code != 0


class TestCliFlows:
    def test_publish_run_status_log(self, cli, tmp_path):
        platform = cli.server.platform
        cli_login(cli, scopes=[platform.flows.publish_scope])
        definition = {"StartAt": "Only", "States": {
            "Only": {"Type": "Pass", "Result": {"ok": 1}, "ResultPath": "$.r", "End": True}}}
        def_path = tmp_path / "flow.json"
        def_path.write_text(json.dumps(definition))
        schema_path = tmp_path / "schema.json"
        schema_path.write_text(json.dumps(
            {"type": "object", "properties": {"seed": {"type": "integer", "default": 9}}}))

        flow = jout(cli("flow", "publish", "--definition", str(def_path),
                        "--schema", str(schema_path), "--title", "cli demo"))
        assert flow["title"] == "cli demo"

        cli_login(cli, scopes=[flow["scope"]])
        run = jout(cli("flow", "run", flow["flow_id"], "--label", "cli-run",
                       input="{}"))
        run_id = run["run_id"]

        def finished():
            doc = jout(cli("flow", "status", run_id))
            return doc if doc["status"] == "SUCCEEDED" else None

        done = wait_until(finished, timeout=15, message="run completion via CLI")
        assert done["output"] == {"seed": 9, "r": {"ok": 1}}
        assert done["label"] == "cli-run"

        log_lines = [json.loads(line) for line in cli("flow", "log", run_id).splitlines()]
        assert log_lines[0]["kind"] == "RunStarted"
        assert log_lines[-1]["kind"] == "RunCompleted"

        listing = jout(cli("flow", "list"))
        assert any(f["flow_id"] == flow["flow_id"] for f in listing["flows"])

    def test_cancel(self, cli, tmp_path):
        platform = cli.server.platform
        cli_login(cli, scopes=[platform.flows.publish_scope])
        definition = {"StartAt": "S", "States": {
            "S": {"Type": "Action", "ActionUrl": platform.provider_url("sleep"),
                  "Parameters": {"seconds": 3600}, "ResultPath": "$.out", "End": True}}}
        def_path = tmp_path / "sleepy.json"
        def_path.write_text(json.dumps(definition))
        flow = jout(cli("flow", "publish", "--definition", str(def_path)))
        cli_login(cli, scopes=[flow["scope"]])
        run = jout(cli("flow", "run", flow["flow_id"], input="{}"))
        out = jout(cli("flow", "cancel", run["run_id"]))
        assert out["status"] == "CANCELED"


class TestCliQueuesAndSelections:
    def test_queue_verbs(self, cli):
        cli_login(cli)
        me = jout(cli("whoami"))["sub"]
        queue = jout(cli("queue", "create", "--sender", me, "--receiver", me))
        jout(cli("queue", "send", queue["queue_id"], '{"files": ["a.tiff"]}'))
        got = jout(cli("queue", "recv", queue["queue_id"]))["messages"]
        assert got[0]["payload"] == {"files": ["a.tiff"]}
        cli("queue", "ack", queue["queue_id"], got[0]["message_id"], got[0]["receipt"])
        assert jout(cli("queue", "recv", queue["queue_id"]))["messages"] == []

    def test_selection_respond(self, cli):
        import os

        import httpx

        platform = cli.server.platform
        scope = platform.providers["user_selection"].scope
        cli_login(cli, scopes=[scope])
        with open(os.environ["FLOWLINE_CREDENTIALS"]) as fh:
            token = json.load(fh)["access_token"]
        run = httpx.post(f"{cli.server.base_url}/providers/user_selection/run",
                         headers={"Authorization": f"Bearer {token}"},
                         json={"request_id": "cli-sel", "body": {"options": ["approve", "reject"]}},
                         ).json()
        pending = jout(cli("selection", "list"))["pending"]
        assert pending[0]["action_id"] == run["action_id"]
        out = jout(cli("selection", "respond", run["action_id"], "approve"))
        assert out["details"] == {"selection": "approve"}


class TestCliTriggersTimers:
    def test_trigger_verbs(self, cli):
        platform = cli.server.platform
        cli_login(cli, scopes=[platform.flows.publish_scope])
        me = jout(cli("whoami"))["sub"]
        queue = jout(cli("queue", "create", "--receiver", me, "--sender", me))
        echo_scope = platform.providers["echo"].scope
        trig = jout(cli("trigger", "create", "--queue", queue["queue_id"],
                        "--action-url", platform.provider_url("echo"),
                        "--predicate", 'filename.endswith(".tiff")',
                        "--param", "input_string=filename"))
        assert trig["state"] == "disabled"
        cli_login(cli, scopes=[queue["receive_scope"], echo_scope])
        enabled = jout(cli("trigger", "enable", trig["trigger_id"]))
        assert enabled["state"] == "enabled"
        shown = jout(cli("trigger", "show", trig["trigger_id"]))
        assert shown["predicate"] == 'filename.endswith(".tiff")'
        disabled = jout(cli("trigger", "disable", trig["trigger_id"]))
        assert disabled["state"] == "disabled"
        assert "expr" in cli("trigger", "grammar").lower() or "grammar" in cli(
            "trigger", "grammar").lower()

    def test_timer_verbs(self, cli):
        platform = cli.server.platform
        echo_scope = platform.providers["echo"].scope
        cli_login(cli, scopes=[echo_scope])
        timer = jout(cli("timer", "create", "--action-url", platform.provider_url("echo"),
                         "--interval", "0.2", "--count", "2",
                         "--body", '{"input_string": "tick"}'))
        paused = jout(cli("timer", "pause", timer["timer_id"]))
        assert paused["state"] in ("paused", "expired")
        resumed = jout(cli("timer", "resume", timer["timer_id"]))
        assert resumed["state"] in ("active", "expired")
        wait_until(lambda: jout(cli("timer", "show", timer["timer_id"]))["state"] == "expired",
                   timeout=15, message="timer completion via CLI")
        listing = jout(cli("timer", "list"))["timers"]
        assert any(t["timer_id"] == timer["timer_id"] for t in listing)
