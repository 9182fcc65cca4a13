import pytest
from hypothesis import given, settings, strategies as st

from tracekit import events as ev
from tracekit.events import OutState, SourceKind, Timestamp, WaitSource
from tracekit.replay import (FileRef, MapRange, ProcessState, Sched, TraceInconsistency,
                             attribute_pids, file_of_address, replay, replay_trace)
from tracekit.scenario import BUNDLED, bundled_scenario
from tracekit.simulator import simulate
from tracekit.traceformat import ProcessInfo, ProcState, Snapshot
from tracekit.workloads import generate_scenario

T0 = 1_018_876_582_000_000


def at(us):
    return Timestamp.from_us(T0 + us)


def snap(*procs, running=None):
    infos = tuple(ProcessInfo(pid, 1, name, state) for pid, name, state in procs)
    return Snapshot(infos, running or {0: procs[0][0]}, at(0))


def test_event_goes_to_running_pid():
    s = snap((7, "a", ProcState.RUNNING))
    (ae,) = attribute_pids(s, {0: [(at(5), ev.SyscallEntry(5))]})
    assert ae.pid == 7


def test_attribution_follows_sched_change():
    s = snap((1684, "galeon", ProcState.RUNNING), (1579, "X", ProcState.RUNNABLE))
    events = [(at(1), ev.TrapEntry(ev.TRAP_PAGE_FAULT, 0x0804A000)), (at(2), ev.TrapExit()),
              (at(3), ev.SyscallEntry(ev.SYSCALL_IDS["execve"])),
              (at(4), ev.SchedChange(1579, 1684, OutState.BLOCKED)),
              (at(5), ev.SyscallExit(0))]
    pids = [ae.pid for ae in attribute_pids(s, {0: events})]
    assert pids == [1684, 1684, 1684, 1684, 1579]


def test_wakeup_subject_is_payload_pid():
    s = snap((1, "a", ProcState.RUNNING), (2, "b", ProcState.BLOCKED))
    (ae,) = attribute_pids(s, {0: [(at(1), ev.WakeUp(2, WaitSource(SourceKind.TIMER)))]})
    assert ae.pid == 1 and ae.subject == 2


def test_wrong_outgoing_pid_is_inconsistent():
    s = snap((1, "a", ProcState.RUNNING), (2, "b", ProcState.RUNNABLE))
    with pytest.raises(TraceInconsistency, match=str(at(3))):
        attribute_pids(s, {0: [(at(3), ev.SchedChange(1, 2, OutState.RUNNABLE))]})


def _run(s, events):
    return replay(attribute_pids(s, {0: events}), s)


def test_read_resolves_to_opened_file():
    s = snap((7, "a", ProcState.RUNNING), (8, "b", ProcState.RUNNABLE))
    events = [(at(1), ev.SyscallEntry(5)), (at(2), ev.FsOpen(3, "/data/log")),
              (at(3), ev.SyscallExit(3)), (at(4), ev.SyscallEntry(3)), (at(5), ev.FsRead(3, 10)),
              (at(6), ev.SchedChange(8, 7, OutState.BLOCKED))]
    result = _run(s, events)
    st7 = result.processes[7]
    assert st7.sched is Sched.BLOCKED
    assert st7.pending_wait.site == "read" and st7.pending_wait.fd == 3
    assert st7.fd_table[3].display_name == "log"


@pytest.mark.parametrize("bad", [
    [(at(1), ev.FsClose(9))],
    [(at(1), ev.WakeUp(1, WaitSource(SourceKind.TIMER)))],
    [(at(1), ev.ProcExit(0)), (at(2), ev.ProcExit(0))],
    [(at(1), ev.SyscallExit(0))],
    [(at(1), ev.ProcFork(1))],
])
def test_inconsistencies(bad):
    s = snap((1, "a", ProcState.RUNNING))
    with pytest.raises(TraceInconsistency):
        _run(s, bad)


def test_file_of_address():
    st_ = ProcessState(1, 0, "a", Sched.RUNNING, at(0))
    ref = FileRef("file", "/usr/lib/galeon/galeon-bin")
    st_.mmap_table = [MapRange(0x1000, 0x3000, ref), MapRange(0x8000, 0x9000, None)]
    assert file_of_address(st_, 0x1000).display_name == "galeon-bin"
    assert file_of_address(st_, 0x2FFF) is ref
    assert file_of_address(st_, 0x3000) is None
    assert file_of_address(st_, 0x8800) is None


def test_page_fault_on_mapped_binary():
    result = replay_trace(simulate(bundled_scenario("galeon"), 0).trace)[1]
    galeon = next(p for p in result.processes.values() if p.name == "galeon-bin")
    names = {r.file.display_name for r in galeon.mmap_table if r.file is not None}
    assert "galeon-bin" in names


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_attribution_matches_simulator(name):
    run = simulate(bundled_scenario(name), 0)
    attributed, _ = replay_trace(run.trace)
    assert [ae.pid for ae in attributed] == run.merged_pids()


LEGAL = {
    (Sched.RUNNING, Sched.RUNNABLE): "preempted",
    (Sched.RUNNING, Sched.BLOCKED): "blocked",
    (Sched.RUNNING, Sched.EXITED): "exited",
    (Sched.RUNNABLE, Sched.RUNNING): "scheduled",
    (Sched.RUNNABLE, Sched.RUNNABLE): "forked",  # a child coming into existence
}


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6))
def test_replay_of_simulated_trace_is_legal(seed):
    run = simulate(generate_scenario(seed), seed)
    attributed, result = replay_trace(run.trace)
    assert [ae.pid for ae in attributed] == run.merged_pids()
    for tr in result.transitions:
        edge = (tr.before, tr.after)
        if edge == (Sched.BLOCKED, Sched.RUNNABLE):
            assert tr.cause.startswith("woken by")
        else:
            assert LEGAL[edge] == tr.cause
    # one pid per busy cpu at the end
    running = [p for p in result.processes.values() if p.sched is Sched.RUNNING]
    assert len(running) <= len(run.trace.snapshot.running)


def test_connections_registered_on_both_sides():
    result = replay_trace(simulate(bundled_scenario("clients"), 0).trace)[1]
    names = {p.pid: p.name for p in result.processes.values()}
    conns = list(result.connections.values())
    assert len(conns) == 2
    assert {names[c.client_pid] for c in conns} == {"alice", "bob"}
    assert all(names[c.server_pid] == "server" for c in conns)
