"""Asynchronous task resources.

Microservices create a task as soon as they accept a non-blocking request
and keep updating it while the work proceeds; users only ever read their
own tasks.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import secrets
import threading
from dataclasses import asdict, dataclass, field
from enum import Enum

from firecrest.errors import ApiError, not_found
from firecrest.gateway import Param, Route
from firecrest.http import ApiResponse, json_response

logger = logging.getLogger(__name__)


class TaskStatus(str, Enum):
    NEW = "NEW"
    PROGRESS = "PROGRESS"
    WAITING_FOR_USER = "WAITING_FOR_USER"
    SUCCESS = "SUCCESS"
    ERROR = "ERROR"

    @property
    def terminal(self):
        return self in (TaskStatus.SUCCESS, TaskStatus.ERROR)


S = TaskStatus
LEGAL_TRANSITIONS = frozenset(
    {
        (S.NEW, S.PROGRESS),
        (S.NEW, S.ERROR),
        (S.PROGRESS, S.PROGRESS),
        (S.PROGRESS, S.WAITING_FOR_USER),
        (S.WAITING_FOR_USER, S.PROGRESS),
        (S.PROGRESS, S.SUCCESS),
        (S.PROGRESS, S.ERROR),
        (S.WAITING_FOR_USER, S.ERROR),
    }
)


class IllegalTransition(ApiError):
    def __init__(self, old, new):
        super().__init__(409, f"illegal task transition {old.value} -> {new.value}", "illegal_transition")


@dataclass
class Task:
    task_id: str
    owner: str
    service: str
    status: TaskStatus
    description: str
    created_at: float
    updated_at: float
    data: dict = field(default_factory=dict)

    @property
    def hash_id(self):
        return self.task_id

    def to_json(self) -> dict:
        d = asdict(self)
        d["status"] = self.status.value
        d["hash_id"] = self.hash_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Task":
        d = {k: v for k, v in d.items() if k != "hash_id"}
        d["status"] = TaskStatus(d["status"])
        return cls(**d)


class TaskStore:
    """In-memory map of tasks; one lock serializes every read-modify-write."""

    def __init__(self, clock, snapshot_path=None):
        self.clock = clock
        self.snapshot_path = snapshot_path
        self._tasks: dict[str, Task] = {}
        self._seq: dict[str, int] = {}
        self._counter = 0
        self._lock = threading.RLock()
        # (task_id, from_status, to_status); None marks creation
        self.transition_log: list[tuple[str, TaskStatus | None, TaskStatus]] = []
        self.available = True
        if snapshot_path is not None:
            self.load()

    def ping(self):
        if not self.available:
            raise ConnectionError("task store unavailable")
        return True

    def create_task(self, owner: str, service: str, description: str = "") -> Task:
        with self._lock:
            task_id = secrets.token_hex(16)
            while task_id in self._tasks:
                task_id = secrets.token_hex(16)
            now = self.clock.now()
            task = Task(task_id, owner, service, TaskStatus.NEW, description, now, now)
            self._tasks[task_id] = task
            self._counter += 1
            self._seq[task_id] = self._counter
            self.transition_log.append((task_id, None, TaskStatus.NEW))
            self._persist()
            return copy.deepcopy(task)

    def update_task(self, task_id: str, status, data: dict | None = None, description: str | None = None) -> Task:
        status = TaskStatus(status)
        with self._lock:
            task = self._tasks.get(task_id)
            if task is None:
                raise not_found(f"task {task_id} not found")
            if (task.status, status) not in LEGAL_TRANSITIONS:
                raise IllegalTransition(task.status, status)
            old = task.status
            task.status = status
            if data is not None:
                task.data = copy.deepcopy(data)
            if description is not None:
                task.description = description
            task.updated_at = max(task.updated_at, self.clock.now())
            self.transition_log.append((task_id, old, status))
            self._persist()
            logger.debug("task %s %s -> %s", task_id, old.value, status.value)
            return copy.deepcopy(task)

    def _owned(self, username, task_id) -> Task:
        task = self._tasks.get(task_id)
        # foreign tasks look exactly like missing ones
        if task is None or task.owner != username:
            raise not_found(f"task {task_id} not found")
        return task

    def get_task(self, requester, task_id: str) -> Task:
        with self._lock:
            return copy.deepcopy(self._owned(requester.username, task_id))

    def list_tasks(self, requester) -> list[Task]:
        with self._lock:
            own = [t for t in self._tasks.values() if t.owner == requester.username]
            own.sort(key=lambda t: (t.created_at, self._seq[t.task_id]), reverse=True)
            return copy.deepcopy(own)

    def delete_task(self, requester, task_id: str) -> None:
        with self._lock:
            self._owned(requester.username, task_id)
            del self._tasks[task_id]
            del self._seq[task_id]
            self._persist()

    def peek(self, task_id: str) -> Task | None:
        """Internal read without ownership scoping."""
        with self._lock:
            task = self._tasks.get(task_id)
            return copy.deepcopy(task) if task else None

    def _persist(self):
        if self.snapshot_path is None:
            return
        ordered = sorted(self._tasks.values(), key=lambda t: self._seq[t.task_id])
        tmp = f"{self.snapshot_path}.tmp"
        with open(tmp, "w") as fh:
            json.dump([t.to_json() for t in ordered], fh)
        os.replace(tmp, self.snapshot_path)

    def load(self):
        if not os.path.exists(self.snapshot_path):
            return
        with open(self.snapshot_path) as fh:
            items = json.load(fh)
        with self._lock:
            for d in items:
                task = Task.from_json(d)
                self._counter += 1
                self._tasks[task.task_id] = task
                self._seq[task.task_id] = self._counter


class TasksApi:
    """HTTP surface. Only the read routes go into the public gateway table;
    create/update/delete are served by the internal dispatcher."""

    def __init__(self, store: TaskStore):
        self.store = store

    def _list(self, request, claims):
        return json_response(200, {"tasks": [t.to_json() for t in self.store.list_tasks(claims)]})

    def _get(self, request, claims, task_id):
        return json_response(200, {"task": self.store.get_task(claims, task_id).to_json()})

    def _create(self, request, claims):
        task = self.store.create_task(claims.username, request.param("service", ""), request.param("description", ""))
        return json_response(201, {"task": task.to_json()})

    def _update(self, request, claims, task_id):
        if self.store.peek(task_id) is None:
            raise not_found(f"task {task_id} not found")
        status = request.param("status")
        try:
            status = TaskStatus(status)
        except ValueError:
            raise ApiError(400, f"invalid task status {status!r}", "invalid_status") from None
        data = request.param("data")
        if isinstance(data, str):
            try:
                data = json.loads(data)
            except ValueError:
                raise ApiError(400, "data must be a JSON object", "invalid_data") from None
        if data is not None and not isinstance(data, dict):
            raise ApiError(400, "data must be a JSON object", "invalid_data")
        task = self.store.update_task(task_id, status, data, request.param("description"))
        return json_response(200, {"task": task.to_json()})

    def _delete(self, request, claims, task_id):
        self.store.delete_task(claims, task_id)
        return ApiResponse(204)

    def routes(self):
        tid = Param("task_id", "path", True, description="task identifier")
        return [
            Route("GET", "/tasks", self._list, "tasks", summary="List the user's tasks, newest first",
                  response_schema="TaskList"),
            Route("GET", "/tasks/{task_id}", self._get, "tasks", summary="Get one of the user's tasks",
                  params=(tid,), responses=((200, "the task"), (404, "unknown task")), response_schema="TaskEnvelope"),
        ]

    def internal_routes(self):
        tid = Param("task_id", "path", True)
        return [
            Route("POST", "/tasks", self._create, "tasks", responses=((201, "created"),)),
            Route("PUT", "/tasks/{task_id}", self._update, "tasks", params=(tid,)),
            Route("DELETE", "/tasks/{task_id}", self._delete, "tasks", params=(tid,), responses=((204, "deleted"),)),
        ]
