"""Blocking, non-recursive filesystem commands and small-file transfer.

Each call runs a single delegated command and must finish within the
configured timeout; nothing here creates a task.
"""

from __future__ import annotations

import json
import logging
import posixpath
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout

from firecrest.errors import ApiError
from firecrest.gateway import Param, Route
from firecrest.http import ApiResponse, json_response
from firecrest.services import MACHINE_HEADER, command, require

logger = logging.getLogger(__name__)

MIB = 1024 * 1024
_TRUE = {"1", "true", "yes", "on"}


class UtilitiesService:
    def __init__(self, machines, runner, timeout=5.0, small_file_cap=5 * MIB, workers=8):
        self.machines = machines
        self.runner = runner
        self.timeout = timeout
        self.small_file_cap = small_file_cap
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="firecrest-util")

    def shutdown(self):
        self._pool.shutdown(wait=False, cancel_futures=True)

    def _machine(self, name):
        if not name:
            raise ApiError(400, f"missing machine name (header {MACHINE_HEADER})", "missing_machine")
        machine = self.machines.get(name)
        if machine is None:
            raise ApiError(400, f"unknown machine '{name}'", "unknown_machine")
        return machine

    def _run(self, claims, machine_name, cmd, stdin=None):
        machine = self._machine(machine_name)
        fut = self._pool.submit(self.runner.run, claims, machine, cmd, stdin)
        try:
            result = fut.result(timeout=self.timeout)
        except FutureTimeout:
            raise ApiError(408, f"command did not finish within {self.timeout:g}s", "timeout") from None
        if not result.ok:
            raise ApiError(result.status or 400, result.stderr, "command_failed")
        return result

    # -- python API ------------------------------------------------------
    def ls(self, claims, machine, path, show_hidden=False):
        args = ["ls", "-la" if show_hidden else "-l", path]
        return json.loads(self._run(claims, machine, command(*args)).stdout)

    def file_type(self, claims, machine, path):
        return self._run(claims, machine, command("file", "-b", path)).text

    def mkdir(self, claims, machine, path, parents=False):
        args = ["mkdir", "-p", path] if parents else ["mkdir", path]
        self._run(claims, machine, command(*args))

    def rename(self, claims, machine, source, target):
        self._run(claims, machine, command("mv", "-T", source, target))

    def chmod(self, claims, machine, path, mode):
        self._run(claims, machine, command("chmod", mode, path))

    def chown(self, claims, machine, path, owner=None, group=None):
        if not owner and not group:
            raise ApiError(400, "at least one of owner and group is required", "missing_parameter")
        spec = f"{owner or ''}:{group}" if group else owner
        self._run(claims, machine, command("chown", spec, path))

    def symlink(self, claims, machine, target, link_path):
        self._run(claims, machine, command("ln", "-s", target, link_path))

    def upload_small(self, claims, machine, path, filename, data: bytes):
        if len(data) > self.small_file_cap:
            raise ApiError(
                413,
                f"file exceeds {self.small_file_cap} bytes; use /storage/xfer-external/upload",
                "file_too_large",
            )
        name = posixpath.basename(filename or "")
        if not name or name in (".", ".."):
            raise ApiError(400, "upload needs a file name", "invalid_filename")
        self._run(claims, machine, command("put", posixpath.join(path, name)), data)
        return posixpath.join(path, name)

    def download_small(self, claims, machine, path) -> bytes:
        info = json.loads(self._run(claims, machine, command("stat", path)).stdout)
        if info["type"] == "directory":
            raise ApiError(400, f"'{path}' is a directory", "is_directory")
        if info["size"] > self.small_file_cap:
            raise ApiError(
                413,
                f"file exceeds {self.small_file_cap} bytes; use /storage/xfer-external/download",
                "file_too_large",
            )
        return self._run(claims, machine, command("cat", path)).stdout

    # -- HTTP --------------------------------------------------------------
    @staticmethod
    def _m(request):
        return request.header(MACHINE_HEADER) or request.param("machine")

    def _http_ls(self, request, claims):
        hidden = str(request.param("show_hidden", "")).lower() in _TRUE
        return json_response(200, {"output": self.ls(claims, self._m(request), require(request, "path"), hidden)})

    def _http_file(self, request, claims):
        return json_response(200, {"output": self.file_type(claims, self._m(request), require(request, "path"))})

    def _http_mkdir(self, request, claims):
        parents = str(request.param("parents", "")).lower() in _TRUE
        path = require(request, "path")
        self.mkdir(claims, self._m(request), path, parents)
        return json_response(201, {"output": f"created {path}"})

    def _http_rename(self, request, claims):
        src, dst = require(request, "source_path"), require(request, "target_path")
        self.rename(claims, self._m(request), src, dst)
        return json_response(200, {"output": f"renamed {src} to {dst}"})

    def _http_chmod(self, request, claims):
        path, mode = require(request, "path"), require(request, "mode")
        self.chmod(claims, self._m(request), path, mode)
        return json_response(200, {"output": f"mode of {path} set to {mode}"})

    def _http_chown(self, request, claims):
        path = require(request, "path")
        self.chown(claims, self._m(request), path, request.param("owner"), request.param("group"))
        return json_response(200, {"output": f"ownership of {path} changed"})

    def _http_symlink(self, request, claims):
        target, link = require(request, "target_path"), require(request, "link_path")
        self.symlink(claims, self._m(request), target, link)
        return json_response(201, {"output": f"{link} -> {target}"})

    def _http_upload(self, request, claims):
        upload = request.files.get("file")
        if upload is None:
            raise ApiError(400, "missing multipart file part 'file'", "missing_file")
        dest = self.upload_small(claims, self._m(request), require(request, "path"), upload.filename, upload.data)
        return json_response(201, {"output": f"uploaded {dest}", "path": dest})

    def _http_download(self, request, claims):
        data = self.download_small(claims, self._m(request), require(request, "path"))
        return ApiResponse(200, data, {"Content-Type": "application/octet-stream"})

    def routes(self):
        machine = Param(MACHINE_HEADER, "header", True, description="target machine")
        path_q = Param("path", "query", True, description="absolute path on the machine")
        common = ((400, "bad request or path outside the sandbox"), (401, "unauthorized"),
                  (404, "no such file or directory"), (408, "timed out"))

        def form(*fields):
            return ("form", fields)

        return [
            Route("GET", "/utilities/ls", self._http_ls, "utilities", summary="List a directory (non-recursive)",
                  params=(machine, path_q, Param("show_hidden", "query", False, "boolean")),
                  responses=((200, "entries"),) + common),
            Route("GET", "/utilities/file", self._http_file, "utilities", summary="Classify a file like file(1)",
                  params=(machine, path_q), responses=((200, "classification"),) + common),
            Route("POST", "/utilities/mkdir", self._http_mkdir, "utilities", summary="Create a directory",
                  params=(machine,), body=form(("path", "string", True), ("parents", "boolean", False)),
                  responses=((201, "created"),) + common),
            Route("POST", "/utilities/rename", self._http_rename, "utilities", summary="Rename a file or directory",
                  params=(machine,), body=form(("source_path", "string", True), ("target_path", "string", True)),
                  responses=((200, "renamed"),) + common),
            Route("POST", "/utilities/chmod", self._http_chmod, "utilities", summary="Change permissions",
                  params=(machine,), body=form(("path", "string", True), ("mode", "string", True)),
                  responses=((200, "changed"),) + common),
            Route("POST", "/utilities/chown", self._http_chown, "utilities", summary="Change owner and/or group",
                  params=(machine,),
                  body=form(("path", "string", True), ("owner", "string", False), ("group", "string", False)),
                  responses=((200, "changed"),) + common),
            Route("POST", "/utilities/symlink", self._http_symlink, "utilities", summary="Create a symbolic link",
                  params=(machine,), body=form(("target_path", "string", True), ("link_path", "string", True)),
                  responses=((201, "created"),) + common),
            Route("POST", "/utilities/upload", self._http_upload, "utilities",
                  summary="Upload a small file into a directory", params=(machine,),
                  body=("multipart", (("path", "string", True), ("file", "binary", True))),
                  responses=((201, "uploaded"), (413, "file too large")) + common),
            Route("GET", "/utilities/download", self._http_download, "utilities", summary="Download a small file",
                  params=(machine, path_q),
                  responses=((200, "file bytes"), (413, "file too large")) + common,
                  response_schema="binary"),
        ]
