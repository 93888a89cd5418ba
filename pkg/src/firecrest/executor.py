"""Command executor for one simulated machine.

Stands in for running a command over SSH as the certificate's principal.
Commands are parsed with ``shlex`` and mapped onto sandbox and scheduler
operations; nothing is handed to a real shell.
"""

from __future__ import annotations

import json
import logging
import posixpath
import shlex
import stat
import threading
from dataclasses import dataclass

from firecrest import sandbox as sb
from firecrest.scheduler import SchedulerError, SchedulerUnavailable

logger = logging.getLogger(__name__)


@dataclass
class ExecutionResult:
    returncode: int
    stdout: bytes = b""
    stderr: str = ""
    # HTTP status a service should use when the command failed
    status: int | None = None

    @property
    def ok(self):
        return self.returncode == 0

    @property
    def text(self) -> str:
        return self.stdout.decode("utf-8", "replace")


class UsageError(Exception):
    pass


def job_json(jobs) -> bytes:
    return json.dumps({"jobs": [j.record() for j in jobs]}).encode()


class MachineExecutor:
    def __init__(self, name, sandbox, scheduler):
        self.name = name
        self.sandbox = sandbox
        self.scheduler = scheduler
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    @property
    def call_count(self):
        return len(self.calls)

    def run(self, principal: str, command: str, stdin: bytes | None = None) -> ExecutionResult:
        with self._lock:
            self.calls.append((principal, command))
        try:
            argv = shlex.split(command)
        except ValueError as exc:
            return ExecutionResult(2, stderr=f"parse error: {exc}", status=400)
        if not argv:
            return ExecutionResult(2, stderr="empty command", status=400)
        handler = getattr(self, f"_cmd_{argv[0]}", None)
        if handler is None:
            return ExecutionResult(127, stderr=f"{argv[0]}: command not found", status=400)
        try:
            out = handler(principal, argv[1:], stdin)
        except sb.SandboxError as exc:
            return ExecutionResult(1, stderr=f"{argv[0]}: {exc}", status=exc.status)
        except SchedulerUnavailable as exc:
            return ExecutionResult(1, stderr=str(exc), status=503)
        except SchedulerError as exc:
            return ExecutionResult(1, stderr=str(exc), status=400)
        except UsageError as exc:
            return ExecutionResult(2, stderr=f"{argv[0]}: {exc}", status=400)
        if isinstance(out, str):
            out = out.encode()
        return ExecutionResult(0, stdout=out or b"")

    # -- filesystem ------------------------------------------------------
    def _cmd_ls(self, user, args, _):
        show_hidden = False
        paths = []
        for a in args:
            if a in ("-a", "-la", "-al", "--all"):
                show_hidden = show_hidden or "a" in a
            elif a == "-l":
                pass
            elif a.startswith("-"):
                raise UsageError(f"invalid option -- '{a}'")
            else:
                paths.append(a)
        if len(paths) != 1:
            raise UsageError("expected exactly one path")
        return json.dumps(self.sandbox.ls(user, paths[0], show_hidden=show_hidden))

    def _cmd_file(self, user, args, _):
        args = [a for a in args if a != "-b"]
        if len(args) != 1:
            raise UsageError("expected exactly one path")
        return self.sandbox.file_type(user, args[0])

    def _cmd_stat(self, user, args, _):
        if len(args) != 1:
            raise UsageError("expected exactly one path")
        st = self.sandbox.stat(user, args[0])
        kind = "directory" if stat.S_ISDIR(st.st_mode) else "file"
        return json.dumps({"size": st.st_size, "type": kind})

    def _cmd_mkdir(self, user, args, _):
        parents = "-p" in args
        paths = [a for a in args if a != "-p"]
        if len(paths) != 1:
            raise UsageError("expected exactly one path")
        self.sandbox.mkdir(user, paths[0], parents=parents)

    def _cmd_mv(self, user, args, _):
        if args and args[0] == "-T":
            if len(args) != 3:
                raise UsageError("expected source and target")
            self.sandbox.rename(user, args[1], args[2])
            return
        if len(args) != 2:
            raise UsageError("expected source and target")
        self.sandbox.move(user, args[0], args[1])

    def _cmd_chmod(self, user, args, _):
        if len(args) != 2:
            raise UsageError("expected mode and path")
        self.sandbox.chmod(user, args[1], args[0])

    def _cmd_chown(self, user, args, _):
        if len(args) != 2:
            raise UsageError("expected owner[:group] and path")
        owner, _, group = args[0].partition(":")
        self.sandbox.chown(user, args[1], owner or None, group or None)

    def _cmd_ln(self, user, args, _):
        if len(args) != 3 or args[0] != "-s":
            raise UsageError("only 'ln -s TARGET LINK' is supported")
        self.sandbox.symlink(user, args[1], args[2])

    def _cmd_put(self, user, args, stdin):
        if len(args) != 1 or stdin is None:
            raise UsageError("expected a path and data on stdin")
        self.sandbox.write(user, args[0], stdin)

    def _cmd_cat(self, user, args, _):
        if len(args) != 1:
            raise UsageError("expected exactly one path")
        return self.sandbox.read(user, args[0])

    def _cmd_rsync(self, user, args, _):
        if len(args) != 3 or args[0] != "-a":
            raise UsageError("only 'rsync -a SRC DST' is supported")
        self.sandbox.rsync(user, args[1], args[2])

    def _cmd_rm(self, user, args, _):
        if len(args) != 2 or args[0] not in ("-r", "-rf"):
            raise UsageError("only 'rm -r PATH' is supported")
        self.sandbox.remove(user, args[1])

    # -- scheduler -------------------------------------------------------
    def _cmd_sbatch(self, user, args, _):
        if len(args) != 1:
            raise UsageError("expected exactly one script path")
        path = args[0]
        script = self.sandbox.read(user, path).decode("utf-8", "replace")
        workdir = posixpath.dirname(self.sandbox.check_vpath(path))
        job_id = self.scheduler.sbatch(user, script, workdir, script_name=path)
        return f"Submitted batch job {job_id}\n"

    def _scoped_query(self, user, args):
        if "--json" not in args:
            raise UsageError("only --json output is supported")
        args = [a for a in args if a != "--json"]
        opts = dict(zip(args[::2], args[1::2]))
        if len(args) % 2 or set(opts) - {"-u", "-j"}:
            raise UsageError("usage: --json -u USER [-j JOBID]")
        if opts.get("-u", user) != user:
            raise SchedulerError(f"Access/permission denied for user {opts['-u']}")
        job_id = None
        if "-j" in opts:
            try:
                job_id = int(opts["-j"])
            except ValueError:
                raise SchedulerError(f"Invalid job id specified: {opts['-j']}") from None
        return job_id

    def _cmd_squeue(self, user, args, _):
        job_id = self._scoped_query(user, args)
        return job_json(self.scheduler.squeue(user, job_id))

    def _cmd_sacct(self, user, args, _):
        job_id = self._scoped_query(user, args)
        return job_json(self.scheduler.sacct(user, job_id))

    def _cmd_scancel(self, user, args, _):
        if len(args) != 1:
            raise UsageError("expected exactly one job id")
        try:
            job_id = int(args[0])
        except ValueError:
            raise SchedulerError(f"scancel: error: Invalid job id {args[0]}") from None
        self.scheduler.scancel(user, job_id)
