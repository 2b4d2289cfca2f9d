"""Deployment configuration: one TOML file plus environment overrides."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["Config", "load_config"]


@dataclass
class Config:
    # server
    listen_host: str = "127.0.0.1"
    listen_port: int = 4330
    base_url: str = "http://flowline.local"
    http_workers: int = 8
    rate_limit_per_sec: float = 50.0
    rate_limit_burst: int = 100
    # store
    store_path: str = "flowline.db"
    store_synchronous: str = "FULL"
    # engine
    engine_workers: int = 8
    poll_initial: float = 2.0
    poll_max: float = 600.0
    wait_time_default: float = 86400.0
    scheduler_tick: float = 0.1
    provider_retry_budget: int = 5
    run_retention: float = 30 * 86400.0
    # queues
    queue_sweep_interval: float = 1.0
    queue_visibility_default: float = 30.0
    queue_max_payload: int = 256 * 1024
    # triggers
    trigger_poll_min: float = 1.0
    trigger_poll_max: float = 60.0
    trigger_batch: int = 10
    trigger_failure_budget: int = 10
    trigger_results_cache: int = 50
    # timers
    timer_tick: float = 0.5
    # auth
    token_lifetime: float = 48 * 3600.0
    scope_prefix: Optional[str] = None
    bootstrap_users: list = field(default_factory=list)
    bootstrap_groups: list = field(default_factory=list)
    # providers
    action_retention: float = 30 * 86400.0
    retention_sweep_interval: float = 60.0
    transfer_roots: list = field(default_factory=list)
    outbox_path: Optional[str] = None
    mint_namespace: str = "fl-demo"
    compute_commands: dict = field(default_factory=dict)

    def scope_base(self) -> str:
        return self.scope_prefix or f"{self.base_url.rstrip('/')}/scopes"


_SECTIONS = {
    "server": {
        "listen_host": "listen_host",
        "listen_port": "listen_port",
        "base_url": "base_url",
        "http_workers": "http_workers",
        "rate_limit_per_sec": "rate_limit_per_sec",
        "rate_limit_burst": "rate_limit_burst",
    },
    "store": {"path": "store_path", "synchronous": "store_synchronous"},
    "engine": {
        "workers": "engine_workers",
        "poll_initial": "poll_initial",
        "poll_max": "poll_max",
        "wait_time_default": "wait_time_default",
        "scheduler_tick": "scheduler_tick",
        "provider_retry_budget": "provider_retry_budget",
        "run_retention": "run_retention",
    },
    "queues": {
        "sweep_interval": "queue_sweep_interval",
        "visibility_default": "queue_visibility_default",
        "max_payload": "queue_max_payload",
    },
    "triggers": {
        "poll_min": "trigger_poll_min",
        "poll_max": "trigger_poll_max",
        "batch": "trigger_batch",
        "failure_budget": "trigger_failure_budget",
        "results_cache": "trigger_results_cache",
    },
    "timers": {"tick": "timer_tick"},
    "auth": {
        "token_lifetime": "token_lifetime",
        "scope_prefix": "scope_prefix",
        "users": "bootstrap_users",
        "groups": "bootstrap_groups",
    },
    "providers": {
        "action_retention": "action_retention",
        "retention_sweep_interval": "retention_sweep_interval",
        "transfer_roots": "transfer_roots",
        "outbox_path": "outbox_path",
        "mint_namespace": "mint_namespace",
        "compute_commands": "compute_commands",
    },
}

_ENV_OVERRIDES = {
    "FLOWLINE_LISTEN_HOST": ("listen_host", str),
    "FLOWLINE_LISTEN_PORT": ("listen_port", int),
    "FLOWLINE_BASE_URL": ("base_url", str),
    "FLOWLINE_STORE": ("store_path", str),
    "FLOWLINE_POLL_INITIAL": ("poll_initial", float),
    "FLOWLINE_POLL_MAX": ("poll_max", float),
}


def load_config(path: Optional[str] = None, overrides: Optional[dict[str, Any]] = None) -> Config:
    cfg = Config()
    if path:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
        for section, mapping in _SECTIONS.items():
            for key, value in doc.get(section, {}).items():
                attr = mapping.get(key)
                if attr is None:
                    raise ValueError(f"unknown config key [{section}] {key}")
                setattr(cfg, attr, value)
    for env, (attr, cast) in _ENV_OVERRIDES.items():
        if env in os.environ:
            setattr(cfg, attr, cast(os.environ[env]))
    for attr, value in (overrides or {}).items():
        if not hasattr(cfg, attr):
            raise ValueError(f"unknown config override {attr}")
        setattr(cfg, attr, value)
    return cfg
