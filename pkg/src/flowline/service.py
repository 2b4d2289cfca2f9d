"""One deployment: store, auth, providers, engine, queues, triggers, timers.

A Platform owns every service and their background machinery. All services
share one transactional store, and action URLs under the configured base
URL dispatch in process, so flows keep executing with or without an HTTP
listener in front.
"""

from __future__ import annotations

import logging
import os
import threading
from typing import Optional

from .actions import build_providers
from .actions.protocol import ProviderHost
from .authz import AuthService
from .config import Config
from .dispatch import Dispatcher
from .engine import RunEngine
from .flows import FlowsService
from .queues import QueueService
from .store import Store
from .timers import TimerService
from .triggers import TriggerService

logger = logging.getLogger(__name__)

__all__ = ["Platform"]


class Platform:
    def __init__(self, config: Config):
        self.config = config
        self.store = Store(config.store_path, synchronous=config.store_synchronous)
        self.authz = AuthService(self.store, config.scope_base(),
                                 token_lifetime=config.token_lifetime)
        self.authz.bootstrap(config.bootstrap_users, config.bootstrap_groups)
        self.dispatcher = Dispatcher(config.base_url)

        data_dir = os.path.dirname(os.path.abspath(config.store_path)) or "."
        transfer_roots = config.transfer_roots or [os.path.join(data_dir, "transfer")]
        for root in transfer_roots:
            os.makedirs(root, exist_ok=True)
        outbox = config.outbox_path or os.path.join(data_dir, "outbox.txt")

        self.host = ProviderHost(self.store, self.authz,
                                 retention=config.action_retention,
                                 sweep_interval=config.retention_sweep_interval)
        self.providers = build_providers(
            self.host, transfer_roots=transfer_roots, outbox_path=outbox,
            mint_namespace=config.mint_namespace, compute_commands=config.compute_commands)
        for name, provider in self.providers.items():
            provider.url = self.dispatcher.register(f"providers/{name}", provider)

        self.engine = RunEngine(
            self.store, self.dispatcher, self.authz,
            workers=config.engine_workers, poll_initial=config.poll_initial,
            poll_max=config.poll_max, wait_time_default=config.wait_time_default,
            scheduler_tick=config.scheduler_tick,
            provider_retry_budget=config.provider_retry_budget,
            run_retention=config.run_retention)
        self.flows = FlowsService(self.store, self.authz, self.dispatcher, self.engine)
        self.queues = QueueService(
            self.store, self.authz, visibility_default=config.queue_visibility_default,
            max_payload=config.queue_max_payload, sweep_interval=config.queue_sweep_interval)
        self.triggers = TriggerService(
            self.store, self.authz, self.queues, self.dispatcher,
            poll_min=config.trigger_poll_min, poll_max=config.trigger_poll_max,
            batch=config.trigger_batch, failure_budget=config.trigger_failure_budget,
            results_cache=config.trigger_results_cache,
            track_initial=config.poll_initial, track_max=config.poll_max)
        self.timers = TimerService(self.store, self.authz, self.dispatcher,
                                   tick=config.timer_tick)
        self._maintenance: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._started = False

    def provider_url(self, name: str) -> str:
        return self.dispatcher.url_for(f"providers/{name}")

    def flow_url(self, flow_id: str) -> str:
        return self.dispatcher.url_for(f"flows/{flow_id}")

    def start(self) -> "Platform":
        if self._started:
            return self
        self._started = True
        self._stop.clear()
        self.host.start()
        resumed = self.engine.start()
        if resumed:
            logger.info("resumed %d active run(s)", resumed)
        self.queues.start()
        self.triggers.start()
        self.timers.start()
        self._maintenance = threading.Thread(target=self._maintenance_loop,
                                             name="maintenance", daemon=True)
        self._maintenance.start()
        return self

    def stop(self) -> None:
        if not self._started:
            return
        self._started = False
        self._stop.set()
        self.timers.stop()
        self.triggers.stop()
        self.queues.stop()
        self.engine.stop()
        self.host.stop()
        if self._maintenance is not None:
            self._maintenance.join(timeout=5)
        self.dispatcher.close()

    def _maintenance_loop(self) -> None:
        while not self._stop.wait(self.config.retention_sweep_interval):
            try:
                self.engine.sweep_runs()
            except Exception:  # pragma: no cover
                logger.exception("run retention sweep failed")
