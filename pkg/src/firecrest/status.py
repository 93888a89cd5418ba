"""Availability of machines and microservices.

Every probe runs in its own thread with its own deadline, so a hung
backend costs at most one timeout and cannot stall the listing.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor, wait

from firecrest.gateway import Route
from firecrest.http import json_response

logger = logging.getLogger(__name__)

AVAILABLE = "available"
DEGRADED = "degraded"
UNAVAILABLE = "unavailable"

SERVICE_INFO = {
    "compute": ("/jobs", "Batch job submission and management"),
    "storage": ("/storage", "Staged external transfers and recursive internal transfers"),
    "utilities": ("/utilities", "Blocking filesystem commands and small-file transfer"),
    "tasks": ("/tasks", "Tracking of asynchronous requests"),
    "status": ("/status", "Availability of systems and services"),
}


class StatusService:
    def __init__(self, machines, clock, probes=None, probe_timeout=2.0):
        """``probes`` maps service name to a zero-argument health check."""
        self.machines = machines
        self.clock = clock
        self.probes = dict(probes or {})
        self.probe_timeout = probe_timeout
        self._pool = ThreadPoolExecutor(max_workers=16, thread_name_prefix="firecrest-probe")

    def shutdown(self):
        self._pool.shutdown(wait=False, cancel_futures=True)

    def _run_probes(self, checks: dict) -> dict:
        """Return name -> (ok, detail) with a per-probe deadline."""
        futures = {name: self._pool.submit(fn) for name, fn in checks.items()}
        wait(list(futures.values()), timeout=self.probe_timeout)
        results = {}
        for name, fut in futures.items():
            if not fut.done():
                results[name] = (False, f"probe timed out after {self.probe_timeout:g}s")
            elif fut.exception() is not None:
                results[name] = (False, str(fut.exception()))
            else:
                results[name] = (True, "")
        return results

    def list_systems(self, claims=None) -> list[dict]:
        checks = {}
        for name, m in self.machines.items():
            checks[(name, "scheduler")] = m.scheduler.ping
            checks[(name, "filesystem")] = m.sandbox.probe
        results = self._run_probes(checks)
        now = self.clock.now()
        out = []
        for name in self.machines:
            sched_ok, sched_msg = results[(name, "scheduler")]
            fs_ok, fs_msg = results[(name, "filesystem")]
            if sched_ok and fs_ok:
                status, desc = AVAILABLE, "system ready"
            elif not sched_ok:
                status, desc = UNAVAILABLE, f"scheduler: {sched_msg}"
            else:
                status, desc = DEGRADED, f"filesystem: {fs_msg}"
            out.append({"system": name, "status": status, "description": desc, "checked_at": now})
        return out

    def list_services(self, claims=None) -> list[dict]:
        results = self._run_probes({name: fn for name, fn in self.probes.items()})
        out = []
        for name, (endpoint, desc) in SERVICE_INFO.items():
            ok, msg = results.get(name, (True, ""))
            out.append(
                {
                    "name": name,
                    "description": desc if ok else f"{desc} ({msg})",
                    "status": AVAILABLE if ok else UNAVAILABLE,
                    "endpoint": endpoint,
                }
            )
        return out

    def _http_systems(self, request, claims):
        return json_response(200, {"systems": self.list_systems(claims)})

    def _http_services(self, request, claims):
        return json_response(200, {"services": self.list_services(claims)})

    def routes(self):
        return [
            Route("GET", "/status/systems", self._http_systems, "status",
                  summary="Availability of every configured system", response_schema="SystemList"),
            Route("GET", "/status/services", self._http_services, "status",
                  summary="Availability of every microservice", response_schema="ServiceList"),
        ]
