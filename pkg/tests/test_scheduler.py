import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from firecrest.clock import VirtualClock
from support import brute_force_schedule
from firecrest.scheduler import JobState, SchedulerError, SchedulerSim, SchedulerUnavailable, parse_script, parse_time


def script(wall="00:00:30", name=None, body="echo hi"):
    lines = ["#!/bin/bash"]
    if name:
        lines.append(f"#SBATCH --job-name={name}")
    lines.append(f"#SBATCH --time={wall}")
    lines.append(body)
    return "\n".join(lines) + "\n"


def secs(n):
    return f"{n // 3600}:{n % 3600 // 60:02d}:{n % 60:02d}"


@pytest.mark.parametrize(
    "text,expected",
    [("10", 600), ("1:30", 90), ("01:00:00", 3600), ("1-2", 93600), ("1-0:30", 88200), ("1-0:0:5", 86405)],
)
def test_parse_time(text, expected):
    assert parse_time(text) == expected


@pytest.mark.parametrize("text", ["abc", "1:60", "0", "1:2:3:4", "", "1-24"])
def test_parse_time_rejects(text):
    with pytest.raises(SchedulerError):
        parse_time(text)


def test_parse_script():
    opts = parse_script("#!/bin/bash\n#SBATCH -J hello\n#SBATCH --time=5\n#SBATCH --nodes=2\necho hi\n")
    assert opts["job_name"] == "hello"
    assert opts["wall_time"] == 300
    assert opts["body"] == "echo hi"
    assert any("--nodes" in w for w in opts["warnings"])
    # directives after the first command are plain comments, as in sbatch
    late = parse_script("#!/bin/sh\necho a\n#SBATCH --time=5\n", default_wall_time=42)
    assert late["wall_time"] == 42


@pytest.mark.parametrize(
    "bad",
    ["echo no shebang\n", "#!/bin/bash\n#SBATCH --time=5\n", "#!/bin/bash\n#SBATCH nodes\necho x\n", "",
     "#!/bin/bash\n#SBATCH --time=xx\necho\n"],
)
def test_parse_script_errors(bad):
    with pytest.raises(SchedulerError):
        parse_script(bad)


def test_hand_computed_fifo_schedule(clock):
    sim = SchedulerSim(clock, slots=2)
    t0 = clock.now()
    ids = [sim.sbatch("alice", script(secs(w)), "/home/alice") for w in (30, 10, 20, 5, 40)]
    for _ in range(12):
        sim.tick(7)
    # worked by hand: 2 slots, FIFO, completions before dispatch at equal times
    expected = {1: (0, 30), 2: (0, 10), 3: (10, 30), 4: (30, 35), 5: (30, 70)}
    got = {j.job_id: (j.start_time - t0, j.end_time - t0) for j in sim.sacct("alice")}
    assert got == expected
    assert ids == [1, 2, 3, 4, 5]
    assert all(j.state == JobState.COMPLETED for j in sim.sacct("alice"))


@settings(max_examples=60, deadline=None)
@given(
    slots=st.integers(1, 3),
    jobs=st.lists(st.tuples(st.integers(0, 8), st.integers(1, 25)), min_size=1, max_size=8),
)
def test_fifo_matches_brute_force(slots, jobs):
    # submission offsets are cumulative gaps so they never decrease
    subs, acc = [], 0
    for gap, wall in jobs:
        acc += gap
        subs.append((acc, wall))
    clock = VirtualClock("manual", start=0)
    sim = SchedulerSim(clock, slots=slots)
    for sub, wall in subs:
        sim.tick(sub - clock.now())
        sim.sbatch("u", script(secs(wall)), "/home/u")
    sim.tick(1000)
    got = {j.job_id: (j.start_time, j.end_time) for j in sim.sacct("u")}
    assert got == brute_force_schedule(subs, slots)
    # slot invariant over the trace: never more than `slots` running at once
    events = sorted((s, 1) for s, _ in got.values()) + sorted((e, -1) for _, e in got.values())
    level = 0
    for _, delta in sorted(events, key=lambda e: (e[0], e[1])):
        level += delta
        assert level <= slots


def scripted_run():
    clock = VirtualClock("manual", start=0)
    sim = SchedulerSim(clock, slots=2)
    walls = [13, 7, 21, 5, 9, 17, 3, 11, 8, 15]
    for i, w in enumerate(walls):
        sim.sbatch("alice", script(secs(w), name=f"j{i}"), "/home/alice")
        if i % 3 == 0:
            sim.tick(2)
    for _ in range(50):
        sim.tick(1)
    if sim.squeue("alice"):
        sim.scancel("alice", sim.squeue("alice")[0].job_id)
    return [j.record() for j in sim.sacct("alice")], list(sim.trace)


def test_determinism_two_runs():
    a, b = scripted_run(), scripted_run()
    assert a == b
    assert len(a[0]) == 10


def test_manual_mode_needs_tick(clock):
    sim = SchedulerSim(clock, slots=1)
    jid = sim.sbatch("alice", script("0:10"), "/home/alice")
    assert sim.job(jid).state == JobState.PENDING
    sim.tick(0)
    assert sim.job(jid).state == JobState.RUNNING
    sim.tick(9)
    assert sim.job(jid).state == JobState.RUNNING
    sim.tick(1)
    assert sim.job(jid).state == JobState.COMPLETED


def test_scancel_and_ownership(clock):
    sim = SchedulerSim(clock, slots=1)
    a = sim.sbatch("alice", script("1:00"), "/home/alice")
    b = sim.sbatch("alice", script("1:00"), "/home/alice")
    sim.tick(1)
    with pytest.raises(SchedulerError, match="Invalid job id"):
        sim.scancel("bob", a)
    with pytest.raises(SchedulerError, match="Invalid job id"):
        sim.scancel("alice", 999)
    sim.scancel("alice", a)
    sim.scancel("alice", b)
    assert sim.job(a).state == JobState.CANCELLED and sim.job(b).state == JobState.CANCELLED
    with pytest.raises(SchedulerError, match="terminal"):
        sim.scancel("alice", a)
    assert sim.squeue("alice") == []
    assert sim.sacct("bob") == []


def test_exit_code_makes_job_fail(clock):
    sim = SchedulerSim(clock)
    jid = sim.sbatch("alice", script("0:05", body="false\nexit 3"), "/home/alice")
    sim.tick(10)
    job = sim.job(jid)
    assert job.state == JobState.FAILED and job.exit_code == 3


def test_listener_fires_once_on_terminal(clock):
    sim = SchedulerSim(clock)
    seen = []
    jid = sim.sbatch("alice", script("0:05"), "/home/alice")
    sim.on_terminal(jid, lambda job: seen.append(job.state))
    sim.tick(3)
    assert seen == []
    sim.tick(3)
    sim.tick(3)
    assert seen == [JobState.COMPLETED]
    sim.on_terminal(jid, lambda job: seen.append("late"))
    assert seen[-1] == "late"


def test_unavailable(clock):
    sim = SchedulerSim(clock)
    sim.available = False
    with pytest.raises(SchedulerUnavailable):
        sim.ping()
    with pytest.raises(SchedulerUnavailable):
        sim.sbatch("alice", script(), "/home/alice")


def test_wallclock_mode_progresses_without_tick():
    sim = SchedulerSim(VirtualClock("wallclock"), slots=1)
    jid = sim.sbatch("alice", script("0:01"), "/home/alice")
    time.sleep(1.2)
    assert sim.sacct("alice", jid)[0].state == JobState.COMPLETED


def test_output_written_to_workdir(tmp_path, clock):
    from firecrest.sandbox import Sandbox

    sb = Sandbox(tmp_path, {"alice": "users"})
    sim = SchedulerSim(clock, sb)
    jid = sim.sbatch("alice", script("0:05", body="echo hello"), "/home/alice")
    sim.tick(5)
    out = sb.read("alice", f"/home/alice/slurm-{jid}.out").decode()
    assert "echo hello" in out and "state=COMPLETED" in out
    assert sim.job(jid).record()["output"] == f"/home/alice/slurm-{jid}.out"
