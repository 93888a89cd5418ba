import time

from firecrest.config import MachineConfig, default_config
from firecrest.app import FirecrestApp
from support import Api


def test_all_available(api):
    systems = api.call("GET", "/status/systems").json()["systems"]
    assert [(s["system"], s["status"]) for s in systems] == [("daint-sim", "available")]
    services = api.call("GET", "/status/services").json()["services"]
    assert {s["name"] for s in services} == {"compute", "storage", "utilities", "tasks", "status"}
    assert all(s["status"] == "available" for s in services)


def _two_machine_app(tmp_path):
    cfg = default_config(str(tmp_path / "data"))
    cfg.machines.append(MachineConfig(name="eiger-sim", users={"alice": "users", "bob": "users"}))
    return FirecrestApp(cfg)


def test_fault_injection_isolated(tmp_path):
    app = _two_machine_app(tmp_path)
    try:
        api = Api(app)
        app.machines["eiger-sim"].scheduler.available = False
        got = {s["system"]: s["status"] for s in api.call("GET", "/status/systems").json()["systems"]}
        assert got == {"daint-sim": "available", "eiger-sim": "unavailable"}
        app.machines["eiger-sim"].scheduler.available = True
        app.machines["eiger-sim"].sandbox.available = False
        got = {s["system"]: s["status"] for s in api.call("GET", "/status/systems").json()["systems"]}
        assert got == {"daint-sim": "available", "eiger-sim": "degraded"}
    finally:
        app.close()


def test_hung_backend_bounded_by_probe_timeout(tmp_path):
    cfg = default_config(str(tmp_path / "data"))
    cfg.probe_timeout = 0.3
    app = FirecrestApp(cfg)
    try:
        api = Api(app)
        api.token("alice")
        app.machines["daint-sim"].scheduler.latency = 2.0
        t0 = time.monotonic()
        systems = api.call("GET", "/status/systems").json()["systems"]
        assert time.monotonic() - t0 < 1.5
        assert systems[0]["status"] == "unavailable" and "timed out" in systems[0]["description"]
    finally:
        app.machines["daint-sim"].scheduler.latency = 0
        app.close()


def test_tasks_store_down(app, api):
    app.tasks.available = False
    services = {s["name"]: s["status"] for s in api.call("GET", "/status/services").json()["services"]}
    assert services["tasks"] == "unavailable" and services["compute"] == "available"
