import os

import pytest

from support import host_path

SCRIPT = b"#!/bin/bash\n#SBATCH --job-name=hello\n#SBATCH --time=00:00:20\necho hello\n"


def submit(api, script=SCRIPT, user="alice", machine="daint-sim", name="job.sh"):
    return api.call("POST", "/jobs", user, machine, files={"file": (name, script)})


def test_submit_pipeline(app, api):
    resp = submit(api)
    assert resp.status_code == 201
    ref = resp.json()
    assert ref["task_url"] == f"/tasks/{ref['task_id']}"
    task = api.wait(ref["task_id"])
    assert task["status"] == "SUCCESS", task
    data = task["data"]
    assert data["staging_dir"] == f"/home/alice/firecrest/{ref['task_id']}"
    assert os.path.isfile(host_path(app, data["script"]))
    job = app.machines["daint-sim"].scheduler.job(data["job_id"])
    assert job.owner == "alice" and job.name == "hello"
    # one certificate per delegated step: mkdir, put, sbatch
    commands = [c for _, c in app.machines["daint-sim"].executor.calls]
    assert commands[0].startswith("mkdir -p") and commands[1].startswith("put") and commands[2].startswith("sbatch")


def test_job_lifecycle(app, api):
    job_id = api.wait(submit(api).json()["task_id"])["data"]["job_id"]
    listed = api.run("GET", "/jobs")["data"]["jobs"]
    assert [j["job_id"] for j in listed] == [job_id]
    app.tick(30)
    info = api.run("GET", f"/jobs/{job_id}")["data"]["job"]
    assert info["state"] == "COMPLETED"
    out = host_path(app, info["output"])
    assert os.path.isfile(out) and "echo hello" in open(out).read()
    assert api.run("GET", "/jobs")["data"]["jobs"] == []
    acct = api.run("GET", "/jobs/acct")["data"]["jobs"]
    assert acct[0]["state"] == "COMPLETED"


def test_cancel(app, api):
    job_id = api.wait(submit(api, SCRIPT.replace(b"00:00:20", b"01:00:00")).json()["task_id"])["data"]["job_id"]
    task = api.run("DELETE", f"/jobs/{job_id}")
    assert task["status"] == "SUCCESS" and task["data"]["state"] == "CANCELLED"
    again = api.run("DELETE", f"/jobs/{job_id}")
    assert again["status"] == "ERROR" and "terminal" in again["data"]["error"]


@pytest.mark.parametrize(
    "script,machine,status",
    [(b"", "daint-sim", 400), (SCRIPT, "nowhere", 400), (SCRIPT, None, 400)],
)
def test_submit_rejected_synchronously(api, script, machine, status):
    resp = submit(api, script, machine=machine)
    assert resp.status_code == status


def test_oversize_script(tmp_path):
    from support import Api, make_app

    app = make_app(tmp_path, script_cap=100)
    try:
        assert submit(Api(app), SCRIPT + b"#" * 200).status_code == 413
    finally:
        app.close()


def test_bad_script_fails_task_at_sbatch(api):
    task = api.wait(submit(api, b"echo no shebang\n").json()["task_id"])
    assert task["status"] == "ERROR" and task["data"]["step"] == "sbatch"


def test_scheduler_down(app, api):
    app.machines["daint-sim"].scheduler.available = False
    task = api.wait(submit(api).json()["task_id"])
    assert task["status"] == "ERROR" and task["data"]["step"] == "sbatch"


def test_cross_user_isolation(app, api):
    job_id = api.wait(submit(api).json()["task_id"])["data"]["job_id"]
    assert api.run("GET", "/jobs", user="bob")["data"]["jobs"] == []
    assert api.run("GET", "/jobs/acct", user="bob")["data"]["jobs"] == []
    assert api.run("GET", f"/jobs/{job_id}", user="bob")["status"] == "ERROR"
    assert api.run("DELETE", f"/jobs/{job_id}", user="bob")["status"] == "ERROR"
    assert app.machines["daint-sim"].scheduler.job(job_id).state.value != "CANCELLED"


def test_invalid_job_id(api):
    assert api.call("GET", "/jobs/abc").status_code == 400
