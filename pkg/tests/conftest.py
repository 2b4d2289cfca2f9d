import json
import socket
import threading
import time

import pytest

from flowline.config import Config
from flowline.service import Platform

DEFAULT_SECRET = "s3cret"


def fast_config(tmp_path, **overrides) -> Config:
    cfg = Config(
        store_path=str(tmp_path / "flowline.db"),
        base_url="http://flowline.test",
        engine_workers=4,
        poll_initial=0.05,
        poll_max=1.0,
        scheduler_tick=0.01,
        queue_sweep_interval=0.05,
        queue_visibility_default=30.0,
        trigger_poll_min=0.05,
        trigger_poll_max=2.0,
        timer_tick=0.05,
        retention_sweep_interval=3600.0,
        rate_limit_per_sec=10000.0,
        rate_limit_burst=10000,
        transfer_roots=[str(tmp_path / "transfer")],
        outbox_path=str(tmp_path / "outbox.txt"),
        bootstrap_users=[{"name": "alice", "secret": DEFAULT_SECRET},
                         {"name": "bob", "secret": DEFAULT_SECRET},
                         {"name": "carol", "secret": DEFAULT_SECRET}],
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


class Harness:
    """Drives one platform instance the way a client would."""

    def __init__(self, platform: Platform):
        self.platform = platform
        self.authz = platform.authz

    def user_id(self, name: str) -> str:
        principal = self.authz.principal_by_name(name)
        if principal is None:
            return self.authz.create_principal(name, secret=DEFAULT_SECRET)
        return principal["id"]

    def token(self, name: str, scopes=(), consent="all", lifetime=None) -> str:
        uid = self.user_id(name)
        doc = self.authz.issue_token(uid, list(scopes), consent=consent, lifetime=lifetime)
        return doc["access_token"]

    def publish(self, definition, schema=None, owner="alice", **roles) -> dict:
        intro = {"active": True, "sub": self.user_id(owner), "scopes": []}
        return self.platform.flows.publish_flow(
            intro, definition=definition, input_schema=schema,
            title=roles.pop("title", "test flow"), **roles)

    def run_token(self, flow_doc: dict, user="alice") -> str:
        return self.token(user, scopes=[flow_doc["scope"]], consent="all")

    def start_run(self, flow_doc: dict, input_doc=None, user="alice", token=None, **options) -> dict:
        token = token or self.run_token(flow_doc, user)
        intro = self.authz.introspect(token)
        return self.platform.flows.start_run(
            flow_doc["flow_id"], intro, token, input_doc or {}, **options)

    def wait_run(self, run_id: str, timeout: float = 20.0, statuses=("SUCCEEDED", "FAILED", "CANCELED")) -> dict:
        deadline = time.time() + timeout
        while time.time() < deadline:
            doc = self.platform.engine.run_doc(run_id)
            if doc["status"] in statuses:
                return doc
            time.sleep(0.02)
        raise AssertionError(f"run {run_id} still {doc['status']} after {timeout}s: {json.dumps(doc)}")

    def events(self, run_id: str):
        return self.platform.engine.run_events(run_id)


@pytest.fixture
def platform(tmp_path):
    p = Platform(fast_config(tmp_path))
    p.start()
    yield p
    p.stop()


@pytest.fixture
def harness(platform):
    return Harness(platform)


@pytest.fixture
def cold_platform(tmp_path):
    """A platform whose background machinery is not running."""
    p = Platform(fast_config(tmp_path))
    yield p


def wait_until(predicate, timeout: float = 10.0, interval: float = 0.02, message="condition"):
    deadline = time.time() + timeout
    while time.time() < deadline:
        value = predicate()
        if value:
            return value
        time.sleep(interval)
    raise AssertionError(f"timed out waiting for {message}")


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class LiveServer:
    """Uvicorn in a background thread, for tests that need real sockets."""

    def __init__(self, platform: Platform):
        import uvicorn

        from flowline.gateway import create_app

        self.platform = platform
        self.port = free_port()
        self.base_url = f"http://127.0.0.1:{self.port}"
        config = uvicorn.Config(create_app(platform), host="127.0.0.1", port=self.port,
                                log_level="error")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        wait_until(lambda: self.server.started, timeout=15, message="server startup")
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture
def live_server(platform):
    with LiveServer(platform) as server:
        yield server


def pytest_runtest_logreport(report):
    """One visible PASS/FAIL line per acceptance criterion."""
    if "test_acceptance" not in report.nodeid or report.when != "call":
        return
    name = report.nodeid.split("::")[-1]
    verdict = "PASS" if report.passed else ("FAIL" if report.failed else "SKIP")
    print(f"\nACCEPTANCE {name}: {verdict}", flush=True)
