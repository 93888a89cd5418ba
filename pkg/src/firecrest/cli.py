"""``frcli``: command-line client for the REST API.

Exit codes: 0 success, 1 the server (or a task) reported failure,
2 usage error, 3 polling timed out.
"""

from __future__ import annotations

import json
import os
import posixpath
import sys
import tempfile
import time
from dataclasses import asdict, dataclass

import click
import httpx

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_TIMEOUT = 3

DEFAULT_URL = "http://127.0.0.1:8000"
REFRESH_MARGIN = 30
DEFAULT_UPLOAD_CAP = 5 * 1024**3
TERMINAL = ("SUCCESS", "ERROR")
JOB_TERMINAL = ("COMPLETED", "FAILED", "CANCELLED", "TIMEOUT")


def default_session_path():
    base = os.environ.get("XDG_CONFIG_HOME") or os.path.join(os.path.expanduser("~"), ".config")
    return os.path.join(base, "frcli", "session.json")


class CliError(click.ClickException):
    exit_code = EXIT_FAIL

    def __init__(self, message, status=None, error_id=None):
        super().__init__(message)
        self.status = status
        self.error_id = error_id


class PollTimeout(CliError):
    exit_code = EXIT_TIMEOUT


@dataclass
class Session:
    base_url: str
    client_id: str
    access_token: str
    refresh_token: str
    token_expiry: float
    refresh_expiry: float

    def save(self, path):
        """Write atomically with mode 0600; a second login replaces the file in one step."""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, mode=0o700, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".session-")
        try:
            os.fchmod(fd, 0o600)
            with os.fdopen(fd, "w") as fh:
                json.dump(asdict(self), fh)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls(**json.load(fh))
        except FileNotFoundError:
            raise CliError(f"not logged in (no session at {path}); run 'frcli login'") from None
        except (ValueError, TypeError):
            raise CliError(f"corrupt session file {path}; run 'frcli login' again") from None


def _error_from(resp: httpx.Response) -> CliError:
    try:
        body = resp.json()
        return CliError(f"{resp.status_code}: {body.get('message', resp.text)}", resp.status_code, body.get("error_id"))
    except ValueError:
        return CliError(f"{resp.status_code}: {resp.text[:200]}", resp.status_code)


class Client:
    """Holds the session and refreshes tokens transparently."""

    def __init__(self, session: Session, session_path: str | None = None, http: httpx.Client | None = None):
        self.session = session
        self.session_path = session_path
        self.http = http or httpx.Client(base_url=session.base_url, timeout=30.0)

    @classmethod
    def login(cls, base_url, client_id, client_secret, username, password, http=None):
        http = http or httpx.Client(base_url=base_url, timeout=30.0)
        resp = http.post(
            "/auth/token",
            data={"grant_type": "password", "client_id": client_id, "client_secret": client_secret,
                  "username": username, "password": password},
        )
        if resp.status_code != 200:
            raise _error_from(resp)
        session = _session_from(base_url, client_id, resp.json())
        return cls(session, http=http)

    def refresh(self):
        s = self.session
        resp = self.http.post(
            "/auth/token",
            data={"grant_type": "refresh_token", "refresh_token": s.refresh_token, "client_id": s.client_id},
        )
        if resp.status_code != 200:
            raise CliError("session expired; run 'frcli login' again", resp.status_code, "refresh_failed")
        self.session = _session_from(s.base_url, s.client_id, resp.json())
        if self.session_path:
            self.session.save(self.session_path)

    def _headers(self, extra=None, machine=None):
        headers = {"Authorization": f"Bearer {self.session.access_token}"}
        if machine:
            headers["X-Machine-Name"] = machine
        headers.update(extra or {})
        return headers

    def request(self, method, path, machine=None, **kwargs) -> httpx.Response:
        if time.time() >= self.session.token_expiry - REFRESH_MARGIN:
            self.refresh()
        resp = self.http.request(method, path, headers=self._headers(kwargs.pop("headers", None), machine), **kwargs)
        # server time may run ahead of ours: refresh once on an expired token
        if resp.status_code == 401 and _error_id(resp) == "token_expired":
            self.refresh()
            resp = self.http.request(method, path, headers=self._headers(None, machine), **kwargs)
        if resp.status_code >= 400:
            raise _error_from(resp)
        return resp

    def json(self, method, path, machine=None, **kwargs):
        return self.request(method, path, machine, **kwargs).json()

    def unauthenticated(self, method, url, **kwargs) -> httpx.Response:
        resp = self.http.request(method, url, **kwargs)
        if resp.status_code >= 400:
            raise _error_from(resp)
        return resp

    def poll(self, task_id, interval=2.0, timeout=300.0, on_tick=None) -> dict:
        """Poll until the task is terminal; back off exponentially up to ``interval``."""
        deadline = time.monotonic() + timeout
        delay = min(0.05, interval)
        while True:
            task = self.json("GET", f"/tasks/{task_id}")["task"]
            if task["status"] in TERMINAL:
                return task
            if time.monotonic() + delay > deadline:
                raise PollTimeout(f"task {task_id} still {task['status']} after {timeout:g}s")
            if on_tick:
                on_tick(task)
            time.sleep(delay)
            delay = min(delay * 2, interval)

    def run_task(self, method, path, machine=None, interval=2.0, timeout=300.0, **kwargs) -> dict:
        ref = self.json(method, path, machine, **kwargs)
        return self.poll(ref["task_id"], interval, timeout)


def _error_id(resp):
    try:
        return resp.json().get("error_id")
    except ValueError:
        return None


def _session_from(base_url, client_id, body):
    now = time.time()
    return Session(
        base_url=base_url,
        client_id=client_id,
        access_token=body["access_token"],
        refresh_token=body["refresh_token"],
        token_expiry=now + body["expires_in"],
        refresh_expiry=now + body.get("refresh_expires_in", body["expires_in"]),
    )


# -- output -----------------------------------------------------------------

def _emit(ctx, data, human=None):
    if ctx.obj["json"]:
        click.echo(json.dumps(data, indent=2, sort_keys=True))
    elif human is not None:
        click.echo(human)
    else:
        click.echo(_table(data))


def _table(data):
    if isinstance(data, list) and data and all(isinstance(r, dict) for r in data):
        cols = list(dict.fromkeys(k for r in data for k in r))
        rows = [[_cell(r.get(c)) for c in cols] for r in data]
        widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
        lines = ["  ".join(c.upper().ljust(w) for c, w in zip(cols, widths))]
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in rows]
        return "\n".join(lines)
    if isinstance(data, dict):
        width = max((len(k) for k in data), default=0)
        return "\n".join(f"{k.ljust(width)}  {_cell(v)}" for k, v in data.items())
    if isinstance(data, list):
        return "(none)" if not data else "\n".join(_cell(v) for v in data)
    return _cell(data)


def _cell(v):
    if v is None:
        return "-"
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return str(v)


def _finish(ctx, task, human=None):
    """Print the task outcome; a task ending in ERROR exits 1."""
    if task["status"] != "SUCCESS":
        data = task.get("data") or {}
        if ctx.obj["json"]:
            click.echo(json.dumps(task, indent=2, sort_keys=True))
        raise CliError(f"task {task['task_id']} failed at step '{data.get('step', '?')}': {data.get('error', '')}")
    _emit(ctx, task["data"] if human is None else task, human(task["data"]) if callable(human) else human)


def _client(ctx) -> Client:
    obj = ctx.obj
    if obj.get("client") is None:
        session = Session.load(obj["session_path"])
        if obj["url_override"]:
            session.base_url = obj["url_override"]
        obj["client"] = Client(session, obj["session_path"])
    return obj["client"]


def _machine(ctx):
    m = ctx.obj["machine"]
    if not m:
        raise click.UsageError("--machine (or FRCLI_MACHINE) is required for this command")
    return m


def _poll_args(ctx):
    return {"interval": ctx.obj["interval"], "timeout": ctx.obj["timeout"]}


# -- commands -----------------------------------------------------------------

@click.group()
@click.option("--url", envvar="FRCLI_URL", default=None, help=f"Service URL (env FRCLI_URL, default {DEFAULT_URL}).")
@click.option("--session", "session_path", envvar="FRCLI_SESSION", default=None,
              help="Session file (env FRCLI_SESSION, default ~/.config/frcli/session.json).")
@click.option("--machine", "-m", envvar="FRCLI_MACHINE", default=None, help="Target machine.")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable JSON output.")
@click.option("--interval", type=float, default=2.0, show_default=True, help="Maximum polling interval in seconds.")
@click.option("--timeout", type=float, default=300.0, show_default=True, help="Polling timeout in seconds.")
@click.pass_context
def cli(ctx, url, session_path, machine, as_json, interval, timeout):
    """Client for the FirecREST-style HPC REST API."""
    ctx.ensure_object(dict)
    ctx.obj.update(
        url=url or DEFAULT_URL,
        url_override=url,
        session_path=session_path or default_session_path(),
        machine=machine,
        json=as_json,
        interval=interval,
        timeout=timeout,
        client=None,
    )


@cli.command()
@click.option("--client-id", envvar="FRCLI_CLIENT_ID", required=True)
@click.option("--client-secret", envvar="FRCLI_CLIENT_SECRET", required=True)
@click.option("--username", "-u", required=True)
@click.option("--password", "-p", envvar="FRCLI_PASSWORD", prompt=True, hide_input=True)
@click.pass_context
def login(ctx, client_id, client_secret, username, password):
    """Obtain a token pair and store it in the session file."""
    client = Client.login(ctx.obj["url"], client_id, client_secret, username, password)
    client.session.save(ctx.obj["session_path"])
    _emit(ctx, {"username": username, "base_url": ctx.obj["url"]}, f"logged in as {username}")


@cli.command()
@click.pass_context
def logout(ctx):
    """Remove the session file."""
    try:
        os.unlink(ctx.obj["session_path"])
    except FileNotFoundError:
        pass
    _emit(ctx, {"logged_out": True}, "logged out")


@cli.command("job-submit")
@click.argument("script", type=click.Path(exists=True, dir_okay=False))
@click.option("--wait", is_flag=True, help="Wait until the job itself is finished.")
@click.pass_context
def job_submit(ctx, script, wait):
    """Submit a batch script. Prints the task id, or the job id with --wait."""
    c, machine = _client(ctx), _machine(ctx)
    with open(script, "rb") as fh:
        data = fh.read()
    ref = c.json("POST", "/jobs", machine, files={"file": (os.path.basename(script), data)})
    if not wait:
        _emit(ctx, ref, ref["task_id"])
        return
    task = c.poll(ref["task_id"], **_poll_args(ctx))
    if task["status"] != "SUCCESS":
        _finish(ctx, task)
    job_id = task["data"]["job_id"]
    job = _wait_job(ctx, c, machine, job_id)
    _emit(ctx, {"job_id": job_id, "task_id": ref["task_id"], "job": job,
                "staging_dir": task["data"]["staging_dir"]}, str(job_id))
    if job["state"] != "COMPLETED":
        raise CliError(f"job {job_id} ended in state {job['state']}")


def _wait_job(ctx, c, machine, job_id):
    deadline = time.monotonic() + ctx.obj["timeout"]
    delay = 0.05
    while True:
        remaining = max(deadline - time.monotonic(), 0.1)
        task = c.run_task("GET", f"/jobs/{job_id}", machine, interval=ctx.obj["interval"], timeout=remaining)
        if task["status"] != "SUCCESS":
            _finish(ctx, task)
        job = task["data"]["job"]
        if job["state"] in JOB_TERMINAL:
            return job
        if time.monotonic() + delay > deadline:
            raise PollTimeout(f"job {job_id} still {job['state']} after {ctx.obj['timeout']:g}s")
        time.sleep(delay)
        delay = min(delay * 2, ctx.obj["interval"])


@cli.command("jobs-list")
@click.pass_context
def jobs_list(ctx):
    """Active jobs of the user."""
    task = _client(ctx).run_task("GET", "/jobs", _machine(ctx), **_poll_args(ctx))
    if task["status"] != "SUCCESS":
        _finish(ctx, task)
    _emit(ctx, task["data"]["jobs"])


@cli.command("job-cancel")
@click.argument("job_id", type=int)
@click.pass_context
def job_cancel(ctx, job_id):
    """Cancel a pending or running job."""
    task = _client(ctx).run_task("DELETE", f"/jobs/{job_id}", _machine(ctx), **_poll_args(ctx))
    _finish(ctx, task, lambda d: f"job {d['job_id']} cancelled")


@cli.command("job-acct")
@click.option("--job", "job_id", type=int, default=None, help="Only this job.")
@click.pass_context
def job_acct(ctx, job_id):
    """Accounting records."""
    c, machine = _client(ctx), _machine(ctx)
    path = f"/jobs/{job_id}" if job_id is not None else "/jobs/acct"
    task = c.run_task("GET", path, machine, **_poll_args(ctx))
    if task["status"] != "SUCCESS":
        _finish(ctx, task)
    _emit(ctx, [task["data"]["job"]] if job_id is not None else task["data"]["jobs"])


@cli.command("transfer-upload")
@click.argument("local", type=click.Path(exists=True, dir_okay=False))
@click.argument("remote_dir")
@click.option("--max-size", type=int, default=DEFAULT_UPLOAD_CAP, show_default=True,
              help="Refuse files larger than this before contacting the server.")
@click.pass_context
def transfer_upload(ctx, local, remote_dir, max_size):
    """Staged upload: request URL, PUT bytes, complete, poll."""
    size = os.path.getsize(local)
    if size > max_size:
        raise CliError(f"{local} is {size} bytes, over the {max_size} byte transfer cap")
    c, machine = _client(ctx), _machine(ctx)
    name = os.path.basename(local)
    ref = c.json("POST", "/storage/xfer-external/upload", machine,
                 data={"target_path": remote_dir, "filename": name, "size": str(size)})
    data = ref["task"]["data"]
    with open(local, "rb") as fh:
        c.unauthenticated(data["upload_method"], data["upload_url"], content=fh.read())
    c.json("POST", f"/storage/xfer-external/upload-complete/{ref['task_id']}")
    task = c.poll(ref["task_id"], **_poll_args(ctx))
    _finish(ctx, task, lambda d: f"uploaded {d.get('destination')}")


@cli.command("transfer-download")
@click.argument("remote")
@click.argument("local", type=click.Path(dir_okay=True))
@click.pass_context
def transfer_download(ctx, remote, local):
    """Staged download: stage, poll, fetch the temporary URL without credentials."""
    c, machine = _client(ctx), _machine(ctx)
    task = c.run_task("GET", "/storage/xfer-external/download", machine, params={"source_path": remote},
                      **_poll_args(ctx))
    if task["status"] != "SUCCESS":
        _finish(ctx, task)
    if os.path.isdir(local):
        local = os.path.join(local, posixpath.basename(remote))
    body = c.unauthenticated("GET", task["data"]["download_url"]).content
    _write_local(local, body)
    _emit(ctx, {"path": local, "size": len(body), "sha256": task["data"].get("sha256")}, f"downloaded {local}")


def _write_local(path, data):
    tmp = f"{path}.part"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


@cli.group()
def xfer():
    """Recursive transfers run as scheduler jobs."""


def _xfer(ctx, op, target, source=None):
    form = {"target_path": target}
    if source is not None:
        form["source_path"] = source
    task = _client(ctx).run_task("POST", f"/storage/xfer-external/{op}", _machine(ctx), data=form,
                                 **_poll_args(ctx))
    _finish(ctx, task, lambda d: f"{op} done (job {d.get('job_id')})")


@xfer.command("rsync")
@click.argument("source")
@click.argument("target")
@click.pass_context
def xfer_rsync(ctx, source, target):
    _xfer(ctx, "rsync", target, source)


@xfer.command("mv")
@click.argument("source")
@click.argument("target")
@click.pass_context
def xfer_mv(ctx, source, target):
    _xfer(ctx, "mv", target, source)


@xfer.command("rm")
@click.argument("target")
@click.pass_context
def xfer_rm(ctx, target):
    _xfer(ctx, "rm", target)


@cli.group()
def util():
    """Blocking filesystem commands."""


@util.command("ls")
@click.argument("path")
@click.option("--all", "-a", "show_hidden", is_flag=True)
@click.pass_context
def util_ls(ctx, path, show_hidden):
    out = _client(ctx).json("GET", "/utilities/ls", _machine(ctx),
                            params={"path": path, "show_hidden": str(show_hidden).lower()})["output"]
    cols = ("type", "permissions", "owner", "group", "size", "last_modified", "name")
    _emit(ctx, out, _table([{k: e.get(k) for k in cols} for e in out]) if out else "(empty)")


@util.command("file")
@click.argument("path")
@click.pass_context
def util_file(ctx, path):
    out = _client(ctx).json("GET", "/utilities/file", _machine(ctx), params={"path": path})["output"]
    _emit(ctx, {"path": path, "type": out}, out)


def _post(ctx, endpoint, **form):
    out = _client(ctx).json("POST", f"/utilities/{endpoint}", _machine(ctx),
                            data={k: v for k, v in form.items() if v is not None})
    _emit(ctx, out, out["output"])


@util.command("mkdir")
@click.argument("path")
@click.option("-p", "--parents", is_flag=True)
@click.pass_context
def util_mkdir(ctx, path, parents):
    _post(ctx, "mkdir", path=path, parents=str(parents).lower())


@util.command("rename")
@click.argument("source")
@click.argument("target")
@click.pass_context
def util_rename(ctx, source, target):
    _post(ctx, "rename", source_path=source, target_path=target)


@util.command("chmod")
@click.argument("mode")
@click.argument("path")
@click.pass_context
def util_chmod(ctx, mode, path):
    _post(ctx, "chmod", path=path, mode=mode)


@util.command("chown")
@click.argument("path")
@click.option("--owner")
@click.option("--group")
@click.pass_context
def util_chown(ctx, path, owner, group):
    _post(ctx, "chown", path=path, owner=owner, group=group)


@util.command("symlink")
@click.argument("target")
@click.argument("link")
@click.pass_context
def util_symlink(ctx, target, link):
    _post(ctx, "symlink", target_path=target, link_path=link)


@util.command("upload")
@click.argument("local", type=click.Path(exists=True, dir_okay=False))
@click.argument("remote_dir")
@click.pass_context
def util_upload(ctx, local, remote_dir):
    with open(local, "rb") as fh:
        data = fh.read()
    out = _client(ctx).json("POST", "/utilities/upload", _machine(ctx), data={"path": remote_dir},
                            files={"file": (os.path.basename(local), data)})
    _emit(ctx, out, out["output"])


@util.command("download")
@click.argument("remote")
@click.argument("local", type=click.Path())
@click.pass_context
def util_download(ctx, remote, local):
    body = _client(ctx).request("GET", "/utilities/download", _machine(ctx), params={"path": remote}).content
    if os.path.isdir(local):
        local = os.path.join(local, posixpath.basename(remote))
    _write_local(local, body)
    _emit(ctx, {"path": local, "size": len(body)}, f"downloaded {local}")


@cli.group()
def status():
    """Availability of systems and services."""


@status.command("systems")
@click.pass_context
def status_systems(ctx):
    _emit(ctx, _client(ctx).json("GET", "/status/systems")["systems"])


@status.command("services")
@click.pass_context
def status_services(ctx):
    _emit(ctx, _client(ctx).json("GET", "/status/services")["services"])


@cli.group()
def tasks():
    """Task resources."""


@tasks.command("list")
@click.pass_context
def tasks_list(ctx):
    items = _client(ctx).json("GET", "/tasks")["tasks"]
    cols = ("task_id", "service", "status", "description", "updated_at")
    _emit(ctx, items, _table([{k: t.get(k) for k in cols} for t in items]) if items else "(none)")


@tasks.command("get")
@click.argument("task_id")
@click.pass_context
def tasks_get(ctx, task_id):
    _emit(ctx, _client(ctx).json("GET", f"/tasks/{task_id}")["task"])


@cli.command("task-poll")
@click.argument("task_id")
@click.pass_context
def task_poll(ctx, task_id):
    """Poll a task until it is terminal; exit 3 on timeout."""
    task = _client(ctx).poll(task_id, **_poll_args(ctx))
    if task["status"] != "SUCCESS":
        _finish(ctx, task)
    _emit(ctx, task)


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="frcli", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_FAIL
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except httpx.HTTPError as exc:
        click.echo(f"Error: cannot reach service: {exc}", err=True)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
