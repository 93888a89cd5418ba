"""Plumbing shared by the microservices."""

from __future__ import annotations

import logging
import shlex
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass

from firecrest.errors import ApiError
from firecrest.executor import MachineExecutor
from firecrest.http import ApiRequest, json_response
from firecrest.sandbox import Sandbox
from firecrest.scheduler import SchedulerSim
from firecrest.tasks import TaskStatus

logger = logging.getLogger(__name__)

MACHINE_HEADER = "X-Machine-Name"


@dataclass
class Machine:
    name: str
    sandbox: Sandbox
    scheduler: SchedulerSim
    executor: MachineExecutor


def command(*argv) -> str:
    return shlex.join(str(a) for a in argv)


class DelegatedRunner:
    """Mint one single-command certificate per step and run it through the verifier."""

    def __init__(self, ca, verifier, cert_ttl=60):
        self.ca = ca
        self.verifier = verifier
        self.cert_ttl = min(cert_ttl, ca.max_ttl)

    def run(self, claims, machine: Machine, cmd: str, stdin: bytes | None = None):
        cert = self.ca.mint_certificate(claims, cmd, self.cert_ttl)
        return self.verifier.verify_and_execute(cert, cmd, machine.executor, stdin=stdin)


class Background:
    """Thread pool for asynchronous pipelines, with a way to wait for quiescence."""

    def __init__(self, workers=8):
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="firecrest-bg")
        self._inflight: set[Future] = set()
        self._lock = threading.Lock()
        self._idle = threading.Condition(self._lock)

    def submit(self, fn, *args, **kwargs) -> Future:
        fut = self._pool.submit(self._guard, fn, *args, **kwargs)
        with self._lock:
            self._inflight.add(fut)
        fut.add_done_callback(self._done)
        return fut

    @staticmethod
    def _guard(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception:  # noqa: BLE001
            logger.exception("background step %s failed", getattr(fn, "__name__", fn))
            raise

    def _done(self, fut):
        with self._lock:
            self._inflight.discard(fut)
            if not self._inflight:
                self._idle.notify_all()

    def drain(self, timeout=10.0) -> bool:
        with self._lock:
            return self._idle.wait_for(lambda: not self._inflight, timeout)

    def shutdown(self):
        self._pool.shutdown(wait=True, cancel_futures=True)


class TaskPipeline:
    """Base for services that run steps asynchronously under a task."""

    service_name = ""

    def __init__(self, tasks, machines: dict[str, Machine], runner: DelegatedRunner, background: Background):
        self.tasks = tasks
        self.machines = machines
        self.runner = runner
        self.background = background

    def machine(self, name) -> Machine:
        if not name:
            raise ApiError(400, f"missing machine name (header {MACHINE_HEADER})", "missing_machine")
        m = self.machines.get(name)
        if m is None:
            raise ApiError(400, f"unknown machine '{name}'", "unknown_machine")
        return m

    @staticmethod
    def machine_name(request: ApiRequest):
        return request.header(MACHINE_HEADER) or request.param("machine")

    def start(self, claims, description, fn, *args):
        task = self.tasks.create_task(claims.username, self.service_name, description)
        self.background.submit(self._run_guarded, task.task_id, fn, *args)
        return task

    def _run_guarded(self, task_id, fn, *args):
        try:
            fn(task_id, *args)
        except Exception as exc:  # noqa: BLE001
            logger.exception("pipeline for task %s crashed", task_id)
            self.fail(task_id, "internal", f"{type(exc).__name__}: {exc}")

    def progress(self, task_id, data=None, description=None):
        return self.tasks.update_task(task_id, TaskStatus.PROGRESS, data, description)

    def succeed(self, task_id, data):
        return self.tasks.update_task(task_id, TaskStatus.SUCCESS, data)

    def fail(self, task_id, step, output, **extra):
        task = self.tasks.peek(task_id)
        if task is None or task.status.terminal:
            return task
        data = {**(task.data or {}), "step": step, "error": output, **extra}
        return self.tasks.update_task(task_id, TaskStatus.ERROR, data)


def task_response(task, status=201):
    return json_response(
        status,
        {"task_id": task.task_id, "task_url": f"/tasks/{task.task_id}", "task": task.to_json()},
    )


def require(request: ApiRequest, name: str):
    value = request.param(name)
    if value is None or value == "":
        raise ApiError(400, f"missing parameter '{name}'", "missing_parameter")
    return value
