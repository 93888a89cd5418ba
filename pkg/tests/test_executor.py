import json

import pytest

from firecrest.executor import MachineExecutor
from firecrest.sandbox import Sandbox
from firecrest.scheduler import SchedulerSim


@pytest.fixture
def ex(tmp_path, clock):
    sb = Sandbox(tmp_path, {"alice": "users", "bob": "users"})
    return MachineExecutor("m", sb, SchedulerSim(clock, sb))


def test_put_cat_stat(ex):
    assert ex.run("alice", "put /home/alice/f", stdin=b"abc").ok
    assert ex.run("alice", "cat /home/alice/f").stdout == b"abc"
    assert json.loads(ex.run("alice", "stat /home/alice/f").stdout) == {"size": 3, "type": "file"}
    assert json.loads(ex.run("alice", "stat /home/alice").stdout)["type"] == "directory"


def test_quoting_is_respected(ex):
    assert ex.run("alice", "mkdir '/home/alice/with space'").ok
    assert ex.run("alice", "mkdir /home/alice/a;rm").ok  # one literal name, not a command separator
    names = {e["name"] for e in json.loads(ex.run("alice", "ls -l /home/alice").stdout)}
    assert names == {"with space", "a;rm"}


def test_errors_map_to_status(ex):
    assert ex.run("alice", "cat /home/alice/missing").status == 404
    assert ex.run("alice", "cat /home/bob/x").status == 400
    assert ex.run("alice", "frobnicate /home/alice").status == 400
    assert ex.run("alice", "").status == 400
    assert ex.run("alice", "ls 'unterminated").status == 400
    ex.sandbox.available = False
    assert ex.run("alice", "ls -l /home/alice").status == 503


def test_scheduler_commands(ex):
    ex.run("alice", "put /home/alice/job.sh", stdin=b"#!/bin/bash\n#SBATCH --time=0:10\necho hi\n")
    out = ex.run("alice", "sbatch /home/alice/job.sh")
    assert out.text.strip() == "Submitted batch job 1"
    q = json.loads(ex.run("alice", "squeue --json -u alice").stdout)["jobs"]
    assert [j["job_id"] for j in q] == [1]
    # -u must name the principal
    assert not ex.run("alice", "squeue --json -u bob").ok
    assert ex.run("bob", "scancel 1").status == 400
    assert ex.run("alice", "scancel 1").ok
    acct = json.loads(ex.run("alice", "sacct --json -u alice -j 1").stdout)["jobs"]
    assert acct[0]["state"] == "CANCELLED"


def test_calls_recorded(ex):
    ex.run("alice", "ls -l /home/alice")
    assert ex.calls[-1][:2] == ("alice", "ls -l /home/alice")
