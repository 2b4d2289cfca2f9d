"""Measurement harnesses: invocation throughput/latency and polling overhead.

Both harnesses emit plot-ready data (JSON) so results can be charted:
per-client request latencies and requests/second for the load test, and
per-duration detection overhead for the backoff study.
"""

from __future__ import annotations

import json
import statistics
import threading
import time
from dataclasses import dataclass, field
from typing import Any

import httpx

from .engine import poll_schedule

__all__ = ["ThroughputResult", "run_throughput_bench", "overhead_study", "detection_time"]


@dataclass
class ThroughputResult:
    clients: int
    requests: int
    failures: int
    elapsed: float
    latencies: list[float] = field(default_factory=list)

    @property
    def throughput(self) -> float:
        return self.requests / self.elapsed if self.elapsed > 0 else 0.0

    def summary(self) -> dict:
        ok = [l for l in self.latencies]
        return {
            "clients": self.clients,
            "requests": self.requests,
            "failures": self.failures,
            "elapsed_s": round(self.elapsed, 4),
            "throughput_rps": round(self.throughput, 2),
            "latency_mean_s": round(statistics.mean(ok), 4) if ok else None,
            "latency_p50_s": round(statistics.median(ok), 4) if ok else None,
            "latency_max_s": round(max(ok), 4) if ok else None,
        }


def run_throughput_bench(base_url: str, token: str, flow_id: str, *,
                         client_counts: list[int], requests_per_client: int = 10,
                         timeout: float = 30.0) -> dict:
    """N concurrent clients repeatedly invoke a flow and wait for the
    response; reports latency per request and requests/second per N."""
    results: list[dict] = []
    per_request: list[dict] = []
    for n in client_counts:
        latencies: list[list[float]] = [[] for _ in range(n)]
        failures = [0] * n
        barrier = threading.Barrier(n + 1)

        def client(i: int) -> None:
            with httpx.Client(timeout=timeout) as http:
                barrier.wait()
                for _ in range(requests_per_client):
                    t0 = time.perf_counter()
                    try:
                        response = http.post(
                            f"{base_url}/flows/{flow_id}/run",
                            headers={"Authorization": f"Bearer {token}"},
                            json={"body": {}})
                        ok = response.status_code < 400
                    except httpx.HTTPError:
                        ok = False
                    dt = time.perf_counter() - t0
                    if ok:
                        latencies[i].append(dt)
                    else:
                        failures[i] += 1

        threads = [threading.Thread(target=client, args=(i,), daemon=True) for i in range(n)]
        for t in threads:
            t.start()
        barrier.wait()
        t_start = time.perf_counter()
        for t in threads:
            t.join()
        elapsed = time.perf_counter() - t_start
        flat = [l for sub in latencies for l in sub]
        result = ThroughputResult(clients=n, requests=len(flat), failures=sum(failures),
                                  elapsed=elapsed, latencies=flat)
        results.append(result.summary())
        per_request.extend({"clients": n, "latency_s": round(l, 5), "ok": True} for l in flat)
    return {"series": results, "requests": per_request}


def detection_time(duration: float, initial: float, maximum: float) -> float:
    """Simulated completion-detection time for an action of the given
    duration under the doubling schedule."""
    return poll_schedule(duration, initial, maximum)[-1]


def overhead_study(measured: list[dict], initial: float, maximum: float) -> dict:
    """Join measured detection times with the simulated schedule and compute
    overhead statistics per sleep duration."""
    rows = []
    for sample in measured:
        duration = sample["duration"]
        expected = detection_time(duration, initial, maximum)
        overhead = sample["detected"] - duration
        rows.append({
            "duration_s": duration,
            "detected_s": round(sample["detected"], 4),
            "expected_s": round(expected, 4),
            "overhead_s": round(overhead, 4),
            "overhead_pct": round(100.0 * overhead / duration, 3) if duration > 0 else None,
            "deviation_s": round(sample["detected"] - expected, 4),
        })
    return {"initial_interval_s": initial, "max_interval_s": maximum, "samples": rows}


def write_report(path: str, doc: Any) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
