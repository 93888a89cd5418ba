"""Helpers shared by the test modules."""

from __future__ import annotations

import base64
import hashlib
import hmac
import json
import os
import random
import re
import dataclasses

import httpx

from firecrest.app import FirecrestApp
from firecrest.delegation import CertificateAuthority
from firecrest.identity import Claims
from firecrest.config import DEMO_CLIENT, DEMO_USERS, default_config

MACHINE = "daint-sim"
TERMINAL = ("SUCCESS", "ERROR")


def make_app(tmp_path, **overrides) -> FirecrestApp:
    cfg = default_config(str(tmp_path / "data"))
    for key, value in overrides.items():
        section, _, name = key.partition("__")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, section, value)
    return FirecrestApp(cfg)


class Api:
    """In-process HTTP client: requests go through the real WSGI layer."""

    def __init__(self, app: FirecrestApp):
        self.app = app
        self.http = httpx.Client(transport=httpx.WSGITransport(app=app.wsgi()), base_url="http://testserver")
        self._tokens = {}

    def login(self, user="alice"):
        resp = self.http.post(
            "/auth/token",
            data={"client_id": DEMO_CLIENT[0], "client_secret": DEMO_CLIENT[1],
                  "username": user, "password": DEMO_USERS[user]},
        )
        assert resp.status_code == 200, resp.text
        return resp.json()

    def token(self, user="alice"):
        if user not in self._tokens:
            self._tokens[user] = self.login(user)["access_token"]
        return self._tokens[user]

    def headers(self, user="alice", machine=MACHINE, token=None):
        h = {"Authorization": f"Bearer {token or self.token(user)}"}
        if machine:
            h["X-Machine-Name"] = machine
        return h

    def call(self, method, path, user="alice", machine=MACHINE, **kwargs):
        return self.http.request(method, path, headers=self.headers(user, machine), **kwargs)

    def task(self, task_id, user="alice"):
        resp = self.call("GET", f"/tasks/{task_id}", user)
        assert resp.status_code == 200, resp.text
        return resp.json()["task"]

    def wait(self, task_id, user="alice", tick=5.0, max_ticks=200):
        """Drain background work and tick the scheduler until the task is terminal."""
        for _ in range(max_ticks):
            self.app.drain()
            task = self.task(task_id, user)
            if task["status"] in TERMINAL:
                return task
            self.app.tick(tick)
        raise AssertionError(f"task {task_id} never finished: {task}")

    def run(self, method, path, user="alice", machine=MACHINE, **kwargs):
        resp = self.call(method, path, user, machine, **kwargs)
        assert resp.status_code in (200, 201), resp.text
        return self.wait(resp.json()["task_id"], user)

    def close(self):
        self.http.close()


def hmac_oracle(secret: bytes, method: str, expires: int, path: str) -> str:
    """Independent HMAC-SHA256 over METHOD, expiry and path, newline separated."""
    mac = hmac.new(secret, digestmod=hashlib.sha256)
    mac.update(method.encode() + b"\n" + str(expires).encode() + b"\n" + path.encode())
    return mac.hexdigest()


def tree_digest(root) -> dict:
    """Map relative path -> sha256 for files, 'dir' for directories, 'link:<target>' for symlinks."""
    out = {}
    root = os.fspath(root)
    if not os.path.lexists(root):
        return out
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = os.path.relpath(dirpath, root)
        for d in list(dirnames):
            p = os.path.join(dirpath, d)
            key = os.path.normpath(os.path.join(rel_dir, d))
            if os.path.islink(p):
                out[key] = "link:" + os.readlink(p)
                dirnames.remove(d)
            else:
                out[key] = "dir"
        for f in filenames:
            p = os.path.join(dirpath, f)
            key = os.path.normpath(os.path.join(rel_dir, f))
            if os.path.islink(p):
                out[key] = "link:" + os.readlink(p)
            else:
                with open(p, "rb") as fh:
                    out[key] = hashlib.sha256(fh.read()).hexdigest()
    return out


def host_path(app, vpath, machine=MACHINE):
    return os.path.join(app.machines[machine].sandbox.root, vpath.lstrip("/"))


_SAMPLE = {"task_id": "does-not-exist", "jobid": "1", "operation": "rsync", "key": "alice/x/y"}


def concrete_path(route) -> str:
    """Fill every path parameter of a route template with a plausible value."""
    return re.sub(r"\{([a-zA-Z_]+)(?::path)?\}", lambda m: _SAMPLE.get(m.group(1), "x"), route.path)


def tampered(token: str, username="bob") -> str:
    """Swap the payload for one naming another user but keep the original signature."""
    header, payload, sig = token.split(".")
    claims = json.loads(base64.urlsafe_b64decode(payload + "=" * (-len(payload) % 4)))
    claims["preferred_username"] = claims["sub"] = username
    forged = base64.urlsafe_b64encode(json.dumps(claims).encode()).rstrip(b"=").decode()
    return f"{header}.{forged}.{sig}"


def _flip_b64(sig: str, rng) -> str:
    raw = bytearray(base64.b64decode(sig))
    i = rng.randrange(len(raw))
    raw[i] ^= 1 << rng.randrange(8)
    return base64.b64encode(bytes(raw)).decode()


def adversarial_corpus(ca, clock, n_each=25, seed=7):
    """Yield (certificate, presented command, now) cases that must all be refused."""
    rng = random.Random(seed)
    alice = Claims("alice", "cli", 0, 1, "access")
    other = CertificateAuthority(clock)
    for i in range(n_each):
        cmd = f"rsync -a /home/alice/src{i} /home/alice/dst{i}"
        cert = ca.mint_certificate(alice, cmd, 60)
        t = cert.valid_after + rng.randrange(60)
        # field tampering after signing
        yield dataclasses.replace(cert, principal="bob"), cmd, t
        yield dataclasses.replace(cert, permitted_command=cmd + "; rm -r /home/alice"), cmd + "; rm -r /home/alice", t
        yield dataclasses.replace(cert, valid_before=cert.valid_before + 3600), cmd, cert.valid_before + 10
        yield dataclasses.replace(cert, valid_after=cert.valid_after - 3600), cmd, cert.valid_after - 10
        yield dataclasses.replace(cert, public_key_fingerprint="SHA256:" + "A" * 43), cmd, t
        yield dataclasses.replace(cert, signature=_flip_b64(cert.signature, rng)), cmd, t
        yield dataclasses.replace(cert, signature="not base64!"), cmd, t
        yield dataclasses.replace(cert, signature=""), cmd, t
        # untouched certificate, wrong command
        yield cert, cmd + " ", t
        yield cert, cmd.replace("rsync", "RSYNC"), t
        yield cert, f"rm -r /home/alice/src{i}", t
        yield cert, cmd + "\nrm -r /home/alice", t
        # untouched certificate, outside its window
        yield cert, cmd, cert.valid_before
        yield cert, cmd, cert.valid_before + rng.randrange(1, 10_000)
        yield cert, cmd, cert.valid_after - rng.randrange(1, 10_000)
        # signed by a different CA
        yield other.mint_certificate(alice, cmd, 60), cmd, t


def brute_force_schedule(jobs, slots):
    """Second-by-second reference: at each t finish due jobs, then start FIFO."""
    start, end = {}, {}
    running = {}
    t = 0
    while len(end) < len(jobs):
        for i in [i for i, e in running.items() if e == t]:
            end[i] = t
            del running[i]
        for i, (sub, wall) in enumerate(jobs):
            if len(running) >= slots:
                break
            if i not in start and sub <= t:
                if any(k not in start and jobs[k][0] <= t for k in range(i)):
                    break
                start[i] = t
                running[i] = t + wall
        t += 1
    return {i + 1: (start[i], end[i]) for i in range(len(jobs))}


# criterion number -> (title, passed, detail); printed by the conftest summary hook
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class criterion:
    """Record PASS when the block finishes cleanly, FAIL with the reason otherwise."""

    def __init__(self, number: int, title: str):
        self.number, self.title = number, title
        self.detail = ""

    def __enter__(self):
        ACCEPTANCE[self.number] = (self.title, False, "did not finish")
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            ACCEPTANCE[self.number] = (self.title, True, self.detail)
        else:
            ACCEPTANCE[self.number] = (self.title, False, f"{exc_type.__name__}: {exc}"[:200])
        return False
