"""Job management: submit, list, inspect, cancel and account batch jobs.

Every call returns a task immediately. The actual scheduler interaction
runs in the background, one delegated command per step.
"""

from __future__ import annotations

import json
import logging
import posixpath
import re

from firecrest.errors import ApiError
from firecrest.gateway import Param, Route
from firecrest.http import ApiRequest
from firecrest.services import MACHINE_HEADER, TaskPipeline, command, task_response

logger = logging.getLogger(__name__)

SUBMITTED = re.compile(r"Submitted batch job (\d+)")
DEFAULT_SCRIPT_CAP = 5 * 1024 * 1024
_MACHINE = Param(MACHINE_HEADER, "header", True, description="target machine")


def _job_id(value) -> int:
    try:
        job_id = int(value)
    except (TypeError, ValueError):
        raise ApiError(400, f"invalid job id '{value}'", "invalid_job_id") from None
    if job_id <= 0:
        raise ApiError(400, f"invalid job id '{value}'", "invalid_job_id")
    return job_id


def script_name(filename: str | None) -> str:
    name = posixpath.basename((filename or "").replace("\\", "/"))
    if not name or name.startswith(".") or name in (".", ".."):
        return "script.sh"
    return name


class ComputeService(TaskPipeline):
    service_name = "compute"

    def __init__(self, *args, script_cap=DEFAULT_SCRIPT_CAP, **kwargs):
        super().__init__(*args, **kwargs)
        self.script_cap = script_cap

    # -- python API ------------------------------------------------------
    def submit_job(self, claims, machine_name, script: bytes, filename="script.sh"):
        machine = self.machine(machine_name)
        if not script:
            raise ApiError(400, "job script is empty", "empty_script")
        if len(script) > self.script_cap:
            raise ApiError(413, f"job script exceeds {self.script_cap} bytes", "script_too_large")
        return self.start(claims, "job submission", self._submit, claims, machine, script, script_name(filename))

    def _submit(self, task_id, claims, machine, script, name):
        staging_dir = posixpath.join(machine.sandbox.home(claims.username), "firecrest", task_id)
        script_path = posixpath.join(staging_dir, name)
        self.progress(task_id, {"machine": machine.name, "staging_dir": staging_dir}, "submitting job")
        steps = (
            ("mkdir", command("mkdir", "-p", staging_dir), None),
            ("copy", command("put", script_path), script),
            ("sbatch", command("sbatch", script_path), None),
        )
        result = None
        for step, cmd, stdin in steps:
            result = self.runner.run(claims, machine, cmd, stdin)
            if not result.ok:
                self.fail(task_id, step, result.stderr, returncode=result.returncode)
                return
        m = SUBMITTED.search(result.text)
        if not m:
            self.fail(task_id, "sbatch", f"unexpected sbatch output: {result.text!r}")
            return
        self.succeed(
            task_id,
            {"job_id": int(m.group(1)), "staging_dir": staging_dir, "script": script_path, "machine": machine.name},
        )

    def _query(self, task_id, claims, machine, step, cmd, shape):
        self.progress(task_id, {"machine": machine.name})
        result = self.runner.run(claims, machine, cmd)
        if not result.ok:
            self.fail(task_id, step, result.stderr, returncode=result.returncode)
            return
        jobs = json.loads(result.stdout)["jobs"]
        shape(task_id, jobs)

    def list_jobs(self, claims, machine_name):
        machine = self.machine(machine_name)
        cmd = command("squeue", "--json", "-u", claims.username)

        def done(task_id, jobs):
            self.succeed(task_id, {"machine": machine.name, "jobs": jobs})

        return self.start(claims, "list jobs", self._query, claims, machine, "squeue", cmd, done)

    def get_job(self, claims, machine_name, job_id):
        machine = self.machine(machine_name)
        job_id = _job_id(job_id)
        cmd = command("sacct", "--json", "-u", claims.username, "-j", job_id)

        def done(task_id, jobs):
            if not jobs:
                self.fail(task_id, "sacct", f"job {job_id} not found")
            else:
                self.succeed(task_id, {"machine": machine.name, "job": jobs[0]})

        return self.start(claims, f"job {job_id} info", self._query, claims, machine, "sacct", cmd, done)

    def get_accounting(self, claims, machine_name):
        machine = self.machine(machine_name)
        cmd = command("sacct", "--json", "-u", claims.username)

        def done(task_id, jobs):
            self.succeed(task_id, {"machine": machine.name, "jobs": jobs})

        return self.start(claims, "job accounting", self._query, claims, machine, "sacct", cmd, done)

    def cancel_job(self, claims, machine_name, job_id):
        machine = self.machine(machine_name)
        job_id = _job_id(job_id)
        return self.start(claims, f"cancel job {job_id}", self._cancel, claims, machine, job_id)

    def _cancel(self, task_id, claims, machine, job_id):
        self.progress(task_id, {"machine": machine.name, "job_id": job_id})
        result = self.runner.run(claims, machine, command("scancel", job_id))
        if not result.ok:
            self.fail(task_id, "scancel", result.stderr, job_id=job_id)
            return
        self.succeed(task_id, {"machine": machine.name, "job_id": job_id, "state": "CANCELLED"})

    # -- HTTP --------------------------------------------------------------
    def _http_submit(self, request: ApiRequest, claims):
        upload = request.files.get("file")
        if upload is None:
            raise ApiError(400, "missing multipart file part 'file'", "missing_file")
        task = self.submit_job(claims, self.machine_name(request), upload.data, upload.filename)
        return task_response(task)

    def _http_list(self, request, claims):
        return task_response(self.list_jobs(claims, self.machine_name(request)))

    def _http_acct(self, request, claims):
        return task_response(self.get_accounting(claims, self.machine_name(request)))

    def _http_get(self, request, claims, jobid):
        return task_response(self.get_job(claims, self.machine_name(request), jobid))

    def _http_cancel(self, request, claims, jobid):
        return task_response(self.cancel_job(claims, self.machine_name(request), jobid))

    def routes(self):
        created = ((201, "task created"), (400, "bad request"), (401, "unauthorized"))
        jobid = Param("jobid", "path", True, "integer", "scheduler job id")
        return [
            Route(
                "POST", "/jobs", self._http_submit, "compute",
                summary="Submit a batch job script to a machine",
                params=(_MACHINE,),
                body=("multipart", (("file", "binary", True),)),
                responses=created + ((413, "script too large"),),
                response_schema="TaskReference",
            ),
            Route("GET", "/jobs", self._http_list, "compute", summary="List the user's active jobs",
                  params=(_MACHINE,), responses=created, response_schema="TaskReference"),
            Route("GET", "/jobs/acct", self._http_acct, "compute", summary="Accounting records for the user's jobs",
                  params=(_MACHINE,), responses=created, response_schema="TaskReference"),
            Route("GET", "/jobs/{jobid}", self._http_get, "compute", summary="Information about one job",
                  params=(_MACHINE, jobid), responses=created, response_schema="TaskReference"),
            Route("DELETE", "/jobs/{jobid}", self._http_cancel, "compute", summary="Cancel a job",
                  params=(_MACHINE, jobid), responses=created, response_schema="TaskReference"),
        ]
