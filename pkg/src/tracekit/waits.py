"""Split each process's elapsed time into CPU time and attributed waits.

A process is always in exactly one of four states.  Running time is CPU
time, charged to user mode or to the syscall or trap it is executing.
Runnable time is time spent waiting for a CPU.  Blocked time is classified
once the wake arrives, from the wait site captured when the process was
switched out and from the cause carried by the WakeUp event.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

from . import events as ev
from .accounting import (WAIT_CPU, WAIT_FORK, WAIT_TIMEOUT, WaitBreakdown, WaitCategory,
                         wait_file, wait_generic, wait_process)
from .events import SourceKind, Timestamp, WaitSource
from .replay import (AttributedEvent, Mode, PendingWait, ProcessState, ReplayObserver,
                     ReplayResult, Replayer, Sched, attribute_pids, file_of_address)

__all__ = ["WAIT_CPU", "WAIT_FORK", "WAIT_TIMEOUT", "WaitBreakdown", "WaitCategory",
           "classify_block", "decompose", "analyze_trace", "WaitAnalysis", "render_report"]


def classify_block(pending: PendingWait, source: Optional[WaitSource],
                   state: ProcessState) -> WaitCategory:
    """Category of one blocked interval; total over every (pending, source) pair."""
    site = pending.site
    if site == "read":
        ref = state.fd_table.get(pending.fd)
        if ref is not None:
            return wait_file(ref.display_name)
        return wait_generic(pending.name or "read")
    if site == "page_fault":
        ref = file_of_address(state, pending.address)
        if ref is not None:
            return wait_file(ref.display_name)
        return wait_generic(ev.trap_name(ev.TRAP_PAGE_FAULT))
    if site == "waitpid":
        return wait_process(pending.target_pid)
    if site == "multiplexed" and source is not None:
        if source.kind is SourceKind.FILE:
            ref = state.fd_table.get(source.ref)
            if ref is not None:
                return wait_file(ref.display_name)
        elif source.kind is SourceKind.PROCESS:
            return wait_process(source.ref)
        elif source.kind is SourceKind.TIMER:
            return WAIT_TIMEOUT
    if site == "fork":
        return WAIT_FORK
    return wait_generic(pending.name or "unknown")


class _Accountant(ReplayObserver):
    def __init__(self):
        self.books = {}  # pid -> [WaitBreakdown, since_us, parked_us]

    def _book(self, st: ProcessState):
        b = self.books.get(st.pid)
        if b is None:
            b = self.books[st.pid] = [WaitBreakdown(st.pid, st.name, st.parent_pid),
                                      st.started.to_us(), 0]
        return b

    def before_change(self, st, ts):
        b = self._book(st)
        now = ts.to_us()
        d = now - b[1]
        b[1] = now
        if d <= 0:
            return
        if st.sched is Sched.RUNNING:
            m = st.mode
            b[0].add_running(None if m is None else (m.kind, m.name), d)
        elif st.sched is Sched.RUNNABLE:
            b[0].wait_cpu_us += d
        elif st.sched is Sched.BLOCKED:
            b[2] += d

    def unblocked(self, st, pending, source, ts):
        b = self._book(st)
        b[0].add_wait(classify_block(pending, source, st), b[2])
        b[2] = 0

    def mode_exited(self, st, mode: Mode, ts):
        bd = self._book(st)[0]
        target = bd.syscall_elapsed_us if mode.kind == "syscall" else bd.trap_elapsed_us
        target[mode.name] += ts.to_us() - mode.entered.to_us()

    def event(self, ae, st):
        if st is None:
            return
        bd = self._book(st)[0]
        k = ae.kind
        bd.counters[ev.kind_name(k)] += 1
        if isinstance(k, ev.SyscallEntry):
            bd.syscall_calls[ev.syscall_name(k.syscall_id)] += 1
        elif isinstance(k, ev.TrapEntry):
            bd.trap_calls[ev.trap_name(k.trap_id)] += 1

    def breakdowns(self, result: ReplayResult) -> dict:
        out = {}
        for pid in sorted(result.processes):
            st = result.processes[pid]
            bd = self._book(st)[0]
            bd.name = st.name
            end = st.ended if st.ended is not None else result.end
            bd.elapsed_us = end.to_us() - st.started.to_us()
            out[pid] = bd
        return out


@dataclass
class WaitAnalysis:
    breakdowns: dict
    replay: ReplayResult
    attributed: list

    def render(self) -> str:
        return render_report(self.breakdowns, self.replay)

    def to_json(self) -> dict:
        return report_json(self.breakdowns, self.replay)


def _run(attributed, snapshot):
    acct = _Accountant()
    r = Replayer(snapshot, acct)
    for ae in attributed:
        r.apply(ae)
    result = r.finish()
    return acct.breakdowns(result), result


def decompose(replay_result: ReplayResult, attributed) -> dict:
    """pid -> WaitBreakdown, re-driving the replay with time accounting attached."""
    breakdowns, _ = _run(attributed, replay_result.snapshot)
    return breakdowns


def analyze_trace(trace) -> WaitAnalysis:
    attributed = attribute_pids(trace.snapshot, trace.per_cpu_events())
    breakdowns, result = _run(attributed, trace.snapshot)
    return WaitAnalysis(breakdowns, result, attributed)


# -- reports ----------------------------------------------------------------

def _s(us: int) -> str:
    return f"{us / 1e6:.6f}"


def _desc(items):
    return sorted(items, key=lambda kv: (-kv[1], str(kv[0])))


def render_report(breakdowns: dict, replay_result: Optional[ReplayResult] = None) -> str:
    if not breakdowns:
        return ""
    out = []
    for pid in sorted(breakdowns):
        b = breakdowns[pid]
        out.append(f"Process ({b.pid}, {b.parent_pid}): {b.name}")
        out.append(f"Elapsed {_s(b.elapsed_us)}")
        out.append(f"CPU {_s(b.cpu_us)}")
        out.append(f"CPUUser {_s(b.cpu_user_us)}")
        out.append(f"WaitCPU {_s(b.wait_cpu_us)}")
        out.append(f"WaitTimeout {_s(b.wait_timeout_us)}")
        out.append(f"WaitFork {_s(b.wait_fork_us)}")
        for name, us in _desc(b.wait_file_us.items()):
            if us:
                out.append(f"WaitFile-{name} {_s(us)}")
        for p, us in _desc(b.wait_process_us.items()):
            if us:
                out.append(f"WaitProcess-{p} {_s(us)}")
        for name, us in _desc(b.wait_generic_us.items()):
            if us:
                out.append(f"WaitGeneric-{name} {_s(us)}")
        for title, calls, cpu, elapsed in (
                ("Syscalls", b.syscall_calls, b.cpu_syscall_us, b.syscall_elapsed_us),
                ("Traps", b.trap_calls, b.cpu_trap_us, b.trap_elapsed_us)):
            names = sorted(n for n, c in calls.items() if c)
            if not names:
                continue
            out.append(title)
            for n in names:
                per = elapsed[n] / 1e6 / calls[n]
                out.append(f"  {n} Calls {calls[n]} CPU {_s(cpu[n])} Elapsed {_s(elapsed[n])} "
                           f"Elapsed/Calls {per:.7f}")
        if b.counters:
            out.append("Counters")
            for n in sorted(b.counters):
                out.append(f"  {n} {b.counters[n]}")
        out.append("")
    if replay_result is not None:
        if replay_result.irq_counts:
            out.append("IRQs")
            for irq, n in replay_result.irq_counts.items():
                out.append(f"  {ev.irq_name(irq)} Count {n}")
            out.append(f"  Time {_s(replay_result.irq_us)}")
            out.append("")
        if replay_result.connections:
            out.append("Connections")
            for token in sorted(replay_result.connections):
                c = replay_result.connections[token]
                server = "-" if c.server_pid is None else c.server_pid
                out.append(f"  conn:{token} client {c.client_pid} server {server}")
            out.append("")
    return "\n".join(out)


def report_json(breakdowns: dict, replay_result: Optional[ReplayResult] = None) -> dict:
    out = {"processes": [breakdowns[p].to_json() for p in sorted(breakdowns)]}
    if replay_result is not None:
        out["irqs"] = {ev.irq_name(k): v for k, v in replay_result.irq_counts.items()}
        out["irq_us"] = replay_result.irq_us
        out["connections"] = [
            {"token": t, "client_pid": c.client_pid, "client_fd": c.client_fd,
             "server_pid": c.server_pid, "server_fd": c.server_fd}
            for t, c in sorted(replay_result.connections.items())]
    return out


def render_json(breakdowns: dict, replay_result: Optional[ReplayResult] = None) -> str:
    return json.dumps(report_json(breakdowns, replay_result), indent=2, sort_keys=True) + "\n"
