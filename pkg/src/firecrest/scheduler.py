"""Deterministic batch-scheduler simulator over a virtual clock.

Jobs are dispatched FIFO (lower job id first) into a fixed number of
slots and complete after their wall time. Nothing in the script body is
executed: on completion the body and a banner are written to the job's
output file.
"""

from __future__ import annotations

import dataclasses
import logging
import posixpath
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum

logger = logging.getLogger(__name__)

DEFAULT_WALL_TIME = 60
DEFAULT_SLOTS = 2


class JobState(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    CANCELLED = "CANCELLED"
    FAILED = "FAILED"

    @property
    def terminal(self):
        return self in (JobState.COMPLETED, JobState.CANCELLED, JobState.FAILED)


class SchedulerError(Exception):
    """Error text mirrors what the real command would print on stderr."""


class SchedulerUnavailable(SchedulerError):
    pass


@dataclass
class SimJob:
    job_id: int
    owner: str
    name: str
    workdir: str
    script: str
    body: str
    wall_time: int
    submit_time: float
    output: str
    state: JobState = JobState.PENDING
    start_time: float | None = None
    end_time: float | None = None
    exit_code: int = 0
    # exit code the body requests; applied when the job runs to completion
    planned_exit: int = 0
    warnings: list[str] = field(default_factory=list)

    def record(self) -> dict:
        return {
            "job_id": self.job_id,
            "name": self.name,
            "user": self.owner,
            "state": self.state.value,
            "workdir": self.workdir,
            "submit_time": self.submit_time,
            "start_time": self.start_time,
            "end_time": self.end_time,
            "time_limit": self.wall_time,
            "exit_code": self.exit_code,
            "output": self.output_path(),
        }

    def output_path(self) -> str:
        out = self.output.replace("%j", str(self.job_id)).replace("%u", self.owner).replace("%x", self.name)
        return out if out.startswith("/") else posixpath.join(self.workdir, out)


_DIRECTIVE = re.compile(r"^#SBATCH\s+(.*)$")
_EXIT = re.compile(r"^\s*exit\s+(\d+)\s*$")
_ALIASES = {"-J": "--job-name", "-t": "--time", "-o": "--output"}


def parse_time(value: str) -> int:
    """SLURM time formats: M, M:S, H:M:S, D-H, D-H:M, D-H:M:S."""
    m = re.fullmatch(r"(?:(\d+)-)?(\d+)(?::(\d+))?(?::(\d+))?", value.strip())
    if not m:
        raise SchedulerError(f"sbatch: error: Invalid --time specification: {value}")
    days, a, b, c = m.groups()
    a, b, c = int(a), int(b) if b else None, int(c) if c else None
    if days is not None:
        d = int(days)
        h, mi, s = a, b or 0, c or 0
    elif c is not None:
        d, h, mi, s = 0, a, b, c
    elif b is not None:
        d, h, mi, s = 0, 0, a, b
    else:
        d, h, mi, s = 0, 0, a, 0
    if mi >= 60 or s >= 60 or (days is not None and h >= 24):
        raise SchedulerError(f"sbatch: error: Invalid --time specification: {value}")
    total = ((d * 24 + h) * 60 + mi) * 60 + s
    if total <= 0:
        raise SchedulerError(f"sbatch: error: Invalid --time specification: {value}")
    return total


def parse_script(script: str, default_wall_time=DEFAULT_WALL_TIME) -> dict:
    """Split a batch script into directives and body; raise on bad input."""
    lines = script.splitlines()
    if not lines or not lines[0].startswith("#!"):
        raise SchedulerError(
            "sbatch: error: This does not look like a batch script.  The first line must start "
            "with #! followed by the path to an interpreter."
        )
    opts = {"job_name": None, "wall_time": default_wall_time, "output": "slurm-%j.out"}
    warnings = []
    body = []
    in_header = True
    for line in lines[1:]:
        stripped = line.strip()
        m = _DIRECTIVE.match(stripped)
        if m and in_header:
            _apply_directive(m.group(1).strip(), opts, warnings)
            continue
        if stripped and not stripped.startswith("#"):
            in_header = False
        body.append(line)
    commands = [ln for ln in body if ln.strip() and not ln.strip().startswith("#")]
    if not commands:
        raise SchedulerError("sbatch: error: Batch script contains no executable line")
    planned_exit = 0
    for ln in commands:
        m = _EXIT.match(ln)
        if m:
            planned_exit = int(m.group(1))
            break
    opts.update(body="\n".join(body).strip("\n"), warnings=warnings, planned_exit=planned_exit)
    return opts


def _apply_directive(text: str, opts: dict, warnings: list):
    if not text.startswith("-"):
        raise SchedulerError(f"sbatch: error: Unable to parse directive: #SBATCH {text}")
    if "=" in text and text.startswith("--"):
        key, value = text.split("=", 1)
    else:
        key, _, value = text.partition(" ")
    key = _ALIASES.get(key, key)
    value = value.strip().strip('"').strip("'")
    if key == "--job-name":
        if not value:
            raise SchedulerError("sbatch: error: --job-name requires a value")
        opts["job_name"] = value
    elif key == "--time":
        opts["wall_time"] = parse_time(value)
    elif key == "--output":
        if not value:
            raise SchedulerError("sbatch: error: --output requires a value")
        opts["output"] = value
    else:
        warnings.append(f"sbatch: warning: ignoring unsupported directive {key}")


class SchedulerSim:
    def __init__(self, clock, sandbox=None, slots=DEFAULT_SLOTS, default_wall_time=DEFAULT_WALL_TIME):
        if slots < 1:
            raise ValueError("need at least one slot")
        self.clock = clock
        self.sandbox = sandbox
        self.slots = slots
        self.default_wall_time = default_wall_time
        self.available = True
        self.latency = 0.0
        self._lock = threading.RLock()
        self._jobs: dict[int, SimJob] = {}
        self._next_id = 1
        self._cursor = clock.now()
        self._listeners: dict[int, list] = {}
        self._due: list = []
        # (time, job_id, state) for every state a job enters
        self.trace: list[tuple[float, int, str]] = []

    # -- helpers -------------------------------------------------------
    def _check(self):
        if not self.available:
            raise SchedulerUnavailable("slurm_load_jobs error: Unable to contact slurm controller (connect failure)")
        if self.latency:
            time.sleep(self.latency)

    def _sync(self):
        """Catch up with the clock; in manual mode only tick() moves time."""
        if self.clock.mode != "manual":
            self._run_until(self.clock.now())

    def _set_state(self, job, state, at):
        job.state = state
        self.trace.append((at, job.job_id, state.value))

    def _running(self):
        return [j for j in self._jobs.values() if j.state == JobState.RUNNING]

    def _pending(self):
        return sorted((j for j in self._jobs.values() if j.state == JobState.PENDING), key=lambda j: j.job_id)

    def _run_until(self, target):
        while True:
            self._dispatch(self._cursor)
            running = self._running()
            if not running:
                break
            next_end = min(j.start_time + j.wall_time for j in running)
            if next_end > target:
                break
            self._cursor = next_end
            for j in sorted(running, key=lambda j: j.job_id):
                if j.start_time + j.wall_time == next_end:
                    self._finish(j, next_end)
        self._cursor = max(self._cursor, target)
        self._dispatch(self._cursor)

    def _dispatch(self, at):
        free = self.slots - len(self._running())
        for job in self._pending()[: max(free, 0)]:
            job.start_time = max(at, job.submit_time)
            self._set_state(job, JobState.RUNNING, job.start_time)

    def _finish(self, job, at, state=None):
        job.end_time = at
        if state is None:
            state = JobState.FAILED if job.planned_exit else JobState.COMPLETED
            job.exit_code = job.planned_exit
        self._set_state(job, state, at)
        self._write_output(job)
        self._queue_listeners(job)

    def _queue_listeners(self, job):
        snapshot = dataclasses.replace(job)
        self._due.extend((cb, snapshot) for cb in self._listeners.pop(job.job_id, []))

    def _write_output(self, job):
        if self.sandbox is None or job.start_time is None:
            return
        path = job.output_path()
        banner = (
            f"# scheduler-sim job {job.job_id} ({job.name}) user={job.owner}\n"
            f"# state={job.state.value} exit_code={job.exit_code} "
            f"start={job.start_time:.0f} end={job.end_time:.0f}\n"
        )
        try:
            self.sandbox.system_write(path, (banner + job.body + "\n").encode(), owner=job.owner)
        except Exception:  # noqa: BLE001 - output loss must not break scheduling
            logger.exception("could not write output for job %s", job.job_id)

    # -- commands ------------------------------------------------------
    def ping(self):
        self._check()
        return True

    def sbatch(self, owner: str, script: str, workdir: str, script_name: str = "") -> int:
        """Queue a job; returns its id. Printed form: ``Submitted batch job <id>``."""
        with self._lock:
            self._check()
            self._sync()
            opts = parse_script(script, self.default_wall_time)
            job_id = self._next_id
            self._next_id += 1
            name = opts["job_name"] or (posixpath.basename(script_name) if script_name else "sbatch")
            job = SimJob(
                job_id=job_id,
                owner=owner,
                name=name,
                workdir=workdir,
                script=script,
                body=opts["body"],
                wall_time=opts["wall_time"],
                submit_time=self.clock.now(),
                output=opts["output"],
                planned_exit=opts["planned_exit"],
                warnings=opts["warnings"],
            )
            self._jobs[job_id] = job
            self.trace.append((job.submit_time, job_id, JobState.PENDING.value))
            for w in job.warnings:
                logger.warning("job %s: %s", job_id, w)
        self._fire_due()
        return job_id

    def tick(self, dt: float = 0.0):
        if dt < 0:
            raise ValueError("time never decreases")
        if dt and self.clock.mode == "manual":
            self.clock.advance(dt)
        with self._lock:
            self._run_until(self.clock.now())
        self._fire_due()

    def _fire_due(self):
        # listeners run outside the lock so they may call back into the scheduler
        with self._lock:
            due, self._due = self._due, []
        for cb, job in due:
            try:
                cb(job)
            except Exception:  # noqa: BLE001
                logger.exception("job listener failed for job %s", job.job_id)

    def squeue(self, owner: str, job_id: int | None = None) -> list[SimJob]:
        with self._lock:
            self._check()
            self._sync()
            jobs = [
                j
                for j in self._jobs.values()
                if j.owner == owner and not j.state.terminal and (job_id is None or j.job_id == job_id)
            ]
            result = [dataclasses.replace(j) for j in sorted(jobs, key=lambda j: j.job_id)]
        self._fire_due()
        return result

    def sacct(self, owner: str, job_id: int | None = None) -> list[SimJob]:
        with self._lock:
            self._check()
            self._sync()
            jobs = [j for j in self._jobs.values() if j.owner == owner and (job_id is None or j.job_id == job_id)]
            result = [dataclasses.replace(j) for j in sorted(jobs, key=lambda j: j.job_id)]
        self._fire_due()
        return result

    def scancel(self, owner: str, job_id: int) -> None:
        with self._lock:
            self._check()
            self._sync()
            job = self._jobs.get(job_id)
            # foreign jobs are reported like unknown ones
            if job is None or job.owner != owner:
                raise SchedulerError(f"scancel: error: Kill job error on job id {job_id}: Invalid job id specified")
            if job.state.terminal:
                raise SchedulerError(f"scancel: error: Kill job error on job id {job_id}: job is already terminal")
            now = self.clock.now()
            if job.state == JobState.RUNNING:
                job.exit_code = 0
                self._finish(job, now, JobState.CANCELLED)
            else:
                job.end_time = now
                self._set_state(job, JobState.CANCELLED, now)
                self._queue_listeners(job)
        self._fire_due()

    def on_terminal(self, job_id: int, callback) -> None:
        """Call ``callback(job)`` once the job reaches a terminal state."""
        with self._lock:
            job = self._jobs.get(job_id)
            if job is None:
                raise SchedulerError(f"unknown job {job_id}")
            if not job.state.terminal:
                self._listeners.setdefault(job_id, []).append(callback)
                return
            snapshot = dataclasses.replace(job)
        callback(snapshot)

    def job(self, job_id: int) -> SimJob | None:
        with self._lock:
            j = self._jobs.get(job_id)
            return dataclasses.replace(j) if j else None

    def all_jobs(self) -> list[SimJob]:
        with self._lock:
            return [dataclasses.replace(j) for j in sorted(self._jobs.values(), key=lambda j: j.job_id)]
