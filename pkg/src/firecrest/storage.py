"""External data transfer through a staging object store, plus internal
recursive transfers executed as scheduler jobs.

Staging objects are reached by the client through temporary URLs signed
with HMAC-SHA256 over ``"<METHOD>\\n<expires>\\n<path>"``, so no bearer
token is needed for the bulk bytes.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import posixpath
import threading
from dataclasses import dataclass
from urllib.parse import quote, urlencode

from firecrest.compute import SUBMITTED
from firecrest.errors import ApiError
from firecrest.gateway import Param, Route
from firecrest.http import ApiResponse
from firecrest.sandbox import SandboxError
from firecrest.services import MACHINE_HEADER, TaskPipeline, command, require, task_response
from firecrest.tasks import TaskStatus

logger = logging.getLogger(__name__)

STAGING_PREFIX = "/staging/"
DAY = 24 * 3600
GIB = 1024**3
OPERATIONS = ("rsync", "mv", "rm")


@dataclass(frozen=True)
class TempUrl:
    path: str
    method: str
    expires: int
    signature: str

    @property
    def url(self) -> str:
        query = urlencode({"temp_url_sig": self.signature, "temp_url_expires": self.expires})
        return f"{quote(self.path)}?{query}"


def sign(secret: bytes, method: str, expires: int, path: str) -> str:
    message = f"{method}\n{expires}\n{path}".encode()
    return hmac.new(secret, message, hashlib.sha256).hexdigest()


class TempUrlSigner:
    def __init__(self, secret: bytes | str):
        self.secret = secret.encode() if isinstance(secret, str) else secret

    def make(self, method: str, key: str, expires: int) -> TempUrl:
        path = STAGING_PREFIX + key
        return TempUrl(path, method, int(expires), sign(self.secret, method, int(expires), path))

    def check(self, method: str, path: str, signature: str, expires, now: float) -> None:
        """Raise 401/405 ApiError unless the signature is valid for this method and unexpired."""
        try:
            expires = int(expires)
        except (TypeError, ValueError):
            raise ApiError(401, "missing or invalid temp_url_expires", "invalid_temp_url") from None
        signature = (signature or "").lower()
        # HEAD is allowed with a GET signature, as in SWIFT
        accepted = ("HEAD", "GET") if method == "HEAD" else (method,)
        if any(hmac.compare_digest(sign(self.secret, m, expires, path), signature) for m in accepted):
            if now >= expires:
                raise ApiError(401, "temporary URL expired", "temp_url_expired")
            return
        others = [m for m in ("GET", "PUT") if m not in accepted]
        if any(hmac.compare_digest(sign(self.secret, m, expires, path), signature) for m in others):
            raise ApiError(405, f"temporary URL was not issued for {method}", "temp_url_method")
        raise ApiError(401, "temporary URL signature mismatch", "invalid_temp_url")


@dataclass
class StagedObject:
    object_key: str
    data: bytes
    created_at: float
    # objects are dropped by collect_garbage() once this passes
    expires_at: float | None = None


class StagingStore:
    def __init__(self, clock):
        self.clock = clock
        self.available = True
        self._objects: dict[str, StagedObject] = {}
        self._lock = threading.Lock()

    def _check(self):
        if not self.available:
            raise ApiError(503, "staging store unavailable", "staging_unavailable")

    def put(self, key, data: bytes, expires_at=None):
        self._check()
        with self._lock:
            self._objects[key] = StagedObject(key, bytes(data), self.clock.now(), expires_at)

    def get(self, key) -> StagedObject | None:
        self._check()
        with self._lock:
            return self._objects.get(key)

    def head(self, key) -> bool:
        self._check()
        with self._lock:
            return key in self._objects

    def delete(self, key):
        with self._lock:
            self._objects.pop(key, None)

    def set_expiry(self, key, expires_at):
        with self._lock:
            if key in self._objects:
                self._objects[key].expires_at = expires_at

    def keys(self):
        with self._lock:
            return sorted(self._objects)

    def collect_garbage(self, now=None) -> list[str]:
        now = self.clock.now() if now is None else now
        with self._lock:
            dead = [k for k, o in self._objects.items() if o.expires_at is not None and now >= o.expires_at]
            for k in dead:
                del self._objects[k]
        return dead


def _filename(value) -> str:
    if not value or "/" in value or "\x00" in value or value in (".", ".."):
        raise ApiError(400, f"invalid file name '{value}'", "invalid_filename")
    return value


class StorageService(TaskPipeline):
    service_name = "storage"

    def __init__(
        self,
        *args,
        staging: StagingStore,
        signer: TempUrlSigner,
        clock,
        max_size=5 * GIB,
        upload_ttl=7 * DAY,
        download_ttl=DAY,
        public_url="",
        **kwargs,
    ):
        super().__init__(*args, **kwargs)
        self.staging = staging
        self.signer = signer
        self.clock = clock
        self.max_size = max_size
        self.upload_ttl = upload_ttl
        self.download_ttl = download_ttl
        self.public_url = public_url.rstrip("/")
        self._complete_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    def _url(self, temp: TempUrl) -> str:
        return self.public_url + temp.url

    def _check_path(self, claims, machine, vpath, name="path"):
        if not vpath:
            raise ApiError(400, f"missing parameter '{name}'", "missing_parameter")
        try:
            machine.sandbox.resolve(claims.username, vpath)
        except SandboxError as exc:
            raise ApiError(400, str(exc), "invalid_path") from None
        return machine.sandbox.check_vpath(vpath)

    # -- upload (client -> staging -> filesystem) -------------------------
    def request_upload(self, claims, machine_name, target_path, filename, size):
        machine = self.machine(machine_name)
        target_path = self._check_path(claims, machine, target_path, "target_path")
        filename = _filename(filename)
        try:
            size = int(size)
        except (TypeError, ValueError):
            raise ApiError(400, "size must be an integer byte count", "invalid_size") from None
        if size < 0:
            raise ApiError(400, "size must not be negative", "invalid_size")
        if size > self.max_size:
            raise ApiError(413, f"file of {size} bytes exceeds the transfer limit of {self.max_size}", "too_large")
        task = self.tasks.create_task(claims.username, self.service_name, f"upload {filename} to {target_path}")
        self.progress(task.task_id)
        key = f"{claims.username}/{task.task_id}/{filename}"
        temp = self.signer.make("PUT", key, int(self.clock.now()) + self.upload_ttl)
        data = {
            "machine": machine.name,
            "upload_url": self._url(temp),
            "upload_method": "PUT",
            "expires": temp.expires,
            "object_key": key,
            "target_path": target_path,
            "filename": filename,
            "size": size,
        }
        return self.tasks.update_task(task.task_id, TaskStatus.WAITING_FOR_USER, data)

    def _complete_lock(self, task_id):
        with self._locks_guard:
            return self._complete_locks.setdefault(task_id, threading.Lock())

    def complete_upload(self, claims, task_id):
        task = self.tasks.get_task(claims, task_id)
        if task.service != self.service_name or "object_key" not in task.data:
            raise ApiError(404, f"task {task_id} not found", "not_found")
        with self._complete_lock(task_id):
            task = self.tasks.get_task(claims, task_id)
            if task.status != TaskStatus.WAITING_FOR_USER:
                raise ApiError(409, f"task is {task.status.value}, not waiting for an upload", "not_waiting")
            obj = self.staging.get(task.data["object_key"])
            if obj is None:
                raise ApiError(409, "object has not been uploaded to the staging area yet", "not_uploaded")
            if len(obj.data) > self.max_size:
                raise ApiError(413, "staged object exceeds the transfer limit", "too_large")
            task = self.progress(task_id, task.data, "moving staged object to the filesystem")
        self.background.submit(self._run_guarded, task_id, self._finish_upload, claims, dict(task.data))
        return task

    def _finish_upload(self, task_id, claims, data):
        machine = self.machine(data["machine"])
        obj = self.staging.get(data["object_key"])
        if obj is None:
            self.fail(task_id, "fetch", "staged object disappeared")
            return
        dest = posixpath.join(data["target_path"], data["filename"])
        result = self.runner.run(claims, machine, command("put", dest), obj.data)
        if not result.ok:
            self.fail(task_id, "write", result.stderr)
            return
        self.staging.delete(data["object_key"])
        self.succeed(
            task_id,
            {
                **data,
                "destination": dest,
                "size": len(obj.data),
                "sha256": hashlib.sha256(obj.data).hexdigest(),
            },
        )

    # -- download (filesystem -> staging -> client) -----------------------
    def request_download(self, claims, machine_name, source_path):
        machine = self.machine(machine_name)
        source_path = self._check_path(claims, machine, source_path, "source_path")
        return self.start(claims, f"download {source_path}", self._download, claims, machine, source_path)

    def _download(self, task_id, claims, machine, source_path):
        self.progress(task_id, {"machine": machine.name, "source_path": source_path})
        result = self.runner.run(claims, machine, command("cat", source_path))
        if not result.ok:
            self.fail(task_id, "read", result.stderr)
            return
        key = f"{claims.username}/{task_id}/{posixpath.basename(source_path) or 'download'}"
        expires = int(self.clock.now()) + self.download_ttl
        self.staging.put(key, result.stdout, expires_at=expires)
        temp = self.signer.make("GET", key, expires)
        self.succeed(
            task_id,
            {
                "machine": machine.name,
                "source_path": source_path,
                "download_url": self._url(temp),
                "object_key": key,
                "expires": expires,
                "size": len(result.stdout),
                "sha256": hashlib.sha256(result.stdout).hexdigest(),
            },
        )

    # -- internal recursive transfers ------------------------------------
    def internal_transfer(self, claims, machine_name, operation, target_path, source_path=None):
        if operation not in OPERATIONS:
            raise ApiError(400, f"unknown operation '{operation}'; expected one of {', '.join(OPERATIONS)}", "bad_operation")
        machine = self.machine(machine_name)
        target_path = self._check_path(claims, machine, target_path, "target_path")
        if operation == "rm":
            if source_path:
                raise ApiError(400, "rm takes only target_path", "unexpected_parameter")
            cmd = command("rm", "-r", target_path)
        else:
            if not source_path:
                raise ApiError(400, f"{operation} requires source_path", "missing_parameter")
            source_path = self._check_path(claims, machine, source_path, "source_path")
            cmd = command("rsync", "-a", source_path, target_path) if operation == "rsync" else command("mv", source_path, target_path)
        return self.start(claims, f"{operation} transfer", self._transfer, claims, machine, operation, cmd)

    def _transfer(self, task_id, claims, machine, operation, cmd):
        staging_dir = posixpath.join(machine.sandbox.home(claims.username), "firecrest", task_id)
        script_path = posixpath.join(staging_dir, f"xfer-{operation}.sh")
        script = f"#!/bin/bash\n#SBATCH --job-name=xfer-{operation}\n#SBATCH --time=00:01:00\n{cmd}\n"
        self.progress(task_id, {"machine": machine.name, "operation": operation, "command": cmd})
        for step, c, stdin in (
            ("mkdir", command("mkdir", "-p", staging_dir), None),
            ("copy", command("put", script_path), script.encode()),
            ("sbatch", command("sbatch", script_path), None),
        ):
            result = self.runner.run(claims, machine, c, stdin)
            if not result.ok:
                self.fail(task_id, step, result.stderr)
                return
        m = SUBMITTED.search(result.text)
        if not m:
            self.fail(task_id, "sbatch", f"unexpected sbatch output: {result.text!r}")
            return
        job_id = int(m.group(1))
        base = {"machine": machine.name, "operation": operation, "command": cmd, "job_id": job_id}
        self.progress(task_id, base, f"{operation} scheduled as job {job_id}")

        def on_done(job):
            if job.state.value != "COMPLETED":
                self.fail(task_id, "job", f"transfer job {job.job_id} ended {job.state.value}", job_id=job.job_id)
                return
            res = self.runner.run(claims, machine, cmd)
            if not res.ok:
                self.fail(task_id, operation, res.stderr, job_id=job.job_id)
                return
            self.succeed(task_id, {**base, "job_state": job.state.value})

        machine.scheduler.on_terminal(job_id, on_done)

    # -- staging HTTP surface (no bearer token) ----------------------------
    def _staging(self, request, claims, key):
        path = STAGING_PREFIX + key
        self.signer.check(
            request.method,
            path,
            request.query.get("temp_url_sig"),
            request.query.get("temp_url_expires"),
            self.clock.now(),
        )
        if request.method == "PUT":
            if len(request.body) > self.max_size:
                raise ApiError(413, "object exceeds the transfer limit", "too_large")
            # uncompleted uploads are garbage once their URL has expired
            self.staging.put(key, request.body, expires_at=int(request.query["temp_url_expires"]))
            return ApiResponse(201, b"", {"Content-Type": "text/plain"})
        obj = self.staging.get(key)
        if obj is None:
            raise ApiError(404, "object not found", "not_found")
        return ApiResponse(200, obj.data, {"Content-Type": "application/octet-stream", "ETag": hashlib.md5(obj.data).hexdigest()})

    def probe(self):
        """Health check: a signed HEAD against the store, as a client would do."""
        key = "__probe__/health"
        temp = self.signer.make("GET", key, int(self.clock.now()) + 60)
        self.signer.check("HEAD", temp.path, temp.signature, temp.expires, self.clock.now())
        self.staging.head(key)
        return True

    # -- HTTP --------------------------------------------------------------
    def _http_upload(self, request, claims):
        task = self.request_upload(
            claims,
            self.machine_name(request),
            require(request, "target_path"),
            require(request, "filename"),
            request.param("size", 0),
        )
        return task_response(task)

    def _http_complete(self, request, claims, task_id):
        return task_response(self.complete_upload(claims, task_id), status=200)

    def _http_download(self, request, claims):
        return task_response(self.request_download(claims, self.machine_name(request), require(request, "source_path")))

    def _http_transfer(self, request, claims, operation):
        task = self.internal_transfer(
            claims,
            self.machine_name(request),
            operation,
            require(request, "target_path"),
            request.param("source_path"),
        )
        return task_response(task)

    def routes(self):
        machine = Param(MACHINE_HEADER, "header", True, description="target machine")
        created = ((201, "task created"), (400, "bad request"), (401, "unauthorized"))
        staging_params = (
            Param("key", "path", True, description="staging object key"),
            Param("temp_url_sig", "query", True, description="hex HMAC-SHA256 signature"),
            Param("temp_url_expires", "query", True, "integer", "unix expiry time"),
        )
        staging_resp = ((401, "bad or expired signature"), (405, "URL issued for another method"))
        return [
            Route(
                "POST", "/storage/xfer-external/upload", self._http_upload, "storage",
                summary="Start an upload: returns a task carrying a temporary PUT URL",
                params=(machine,),
                body=("form", (("target_path", "string", True), ("filename", "string", True), ("size", "integer", False))),
                responses=created + ((413, "file too large"),),
                response_schema="TaskReference",
            ),
            Route(
                "POST", "/storage/xfer-external/upload-complete/{task_id}", self._http_complete, "storage",
                summary="Finish an upload: move the staged object onto the filesystem",
                params=(Param("task_id", "path", True),),
                responses=((200, "transfer started"), (404, "unknown task"), (409, "object not uploaded yet")),
                response_schema="TaskReference",
            ),
            Route(
                "GET", "/storage/xfer-external/download", self._http_download, "storage",
                summary="Stage a file for download; the task ends with a temporary GET URL",
                params=(machine, Param("source_path", "query", True)),
                responses=created,
                response_schema="TaskReference",
            ),
            Route(
                "POST", "/storage/xfer-external/{operation}", self._http_transfer, "storage",
                summary="Recursive rsync, mv or rm executed as a scheduler job",
                params=(machine, Param("operation", "path", True, description="rsync, mv or rm")),
                body=("form", (("target_path", "string", True), ("source_path", "string", False))),
                responses=created,
                response_schema="TaskReference",
            ),
            Route("PUT", "/staging/{key:path}", self._staging, "storage", auth=False,
                  summary="Upload bytes with a temporary URL", params=staging_params,
                  body=("binary", ()), responses=((201, "stored"),) + staging_resp),
            Route("GET", "/staging/{key:path}", self._staging, "storage", auth=False,
                  summary="Download bytes with a temporary URL", params=staging_params,
                  responses=((200, "object bytes"), (404, "no such object")) + staging_resp,
                  response_schema="binary"),
            Route("HEAD", "/staging/{key:path}", self._staging, "storage", auth=False,
                  summary="Check an object with a temporary URL", params=staging_params,
                  responses=((200, "object exists"), (404, "no such object")) + staging_resp),
        ]
