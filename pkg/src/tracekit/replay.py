"""Replay a decoded trace: who ran each event, and what every process had open.

Events carry no pid.  The snapshot says what each cpu was running when the
trace started and every SchedChange names the incoming process, so the
running pid of each cpu is known at every point of the merged event order.
Replaying the events in that order rebuilds scheduling state, descriptor
and mapping tables, and the socket connection registry.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from . import events as ev
from .events import OutState, SourceKind, Timestamp, WaitSource
from .traceformat import IDLE_PID, ProcState, Snapshot, merge_events


class TraceInconsistency(ValueError):
    """The event stream contradicts itself; the trace is corrupt."""

    def __init__(self, message: str, timestamp: Optional[Timestamp] = None):
        where = f" at {timestamp}" if timestamp is not None else ""
        super().__init__(f"{message}{where}")
        self.timestamp = timestamp


class AttributedEvent(NamedTuple):
    ts: Timestamp
    cpu: int
    pid: int  # process running on the cpu (for SchedChange, the outgoing one)
    kind: object

    @property
    def subject(self) -> int:
        """The process the event is about: payload pid for wakeups and timer expiries."""
        if isinstance(self.kind, (ev.WakeUp, ev.TimerExpire)):
            return self.kind.pid
        return self.pid


def attribute_pids(snapshot: Snapshot, per_cpu) -> list:
    running = dict(snapshot.running)
    out = []
    for ts, cpu, kind in merge_events(per_cpu):
        if cpu not in running:
            raise TraceInconsistency(f"event on cpu {cpu} missing from the snapshot", ts)
        pid = running[cpu]
        if isinstance(kind, ev.SchedChange):
            if kind.out_pid != pid:
                raise TraceInconsistency(
                    f"cpu {cpu} switches out pid {kind.out_pid} but pid {pid} is running", ts)
            running[cpu] = kind.in_pid
        out.append(AttributedEvent(ts, cpu, pid, kind))
    return out


# -- process state ----------------------------------------------------------

class Sched(enum.Enum):
    RUNNING = "Running"
    RUNNABLE = "Runnable"
    BLOCKED = "Blocked"
    EXITED = "Exited"


@dataclass(frozen=True)
class FileRef:
    kind: str  # file | conn | listener
    path: Optional[str] = None
    conn_token: Optional[int] = None
    fd: Optional[int] = None

    @property
    def display_name(self) -> str:
        if self.kind == "file":
            return self.path.rsplit("/", 1)[-1] or self.path
        if self.kind == "conn":
            return f"conn:{self.conn_token}"
        return f"listen:{self.fd}"


@dataclass
class Mode:
    kind: str  # syscall | trap
    ident: int
    entered: Timestamp
    fault_address: int = 0
    site: Optional["PendingWait"] = None  # wait site seen so far in this episode

    @property
    def name(self) -> str:
        return ev.syscall_name(self.ident) if self.kind == "syscall" else ev.trap_name(self.ident)


@dataclass(frozen=True)
class PendingWait:
    """Why a process blocked, captured when it was switched out.

    site is one of read, page_fault, waitpid, multiplexed, fork, generic.
    """

    site: str
    blocked_at: Optional[Timestamp] = None
    fd: Optional[int] = None
    address: Optional[int] = None
    target_pid: Optional[int] = None
    fds: tuple = ()
    timeout_us: int = 0
    name: str = ""  # syscall or trap name, for generic waits


@dataclass
class MapRange:
    start: int
    end: int
    file: Optional[FileRef]  # None for anonymous memory


@dataclass
class ProcessState:
    pid: int
    parent_pid: int
    name: str
    sched: Sched
    started: Timestamp
    modes: list = field(default_factory=list)
    pending_wait: Optional[PendingWait] = None
    fd_table: dict = field(default_factory=dict)
    mmap_table: list = field(default_factory=list)
    children: set = field(default_factory=set)
    exit_seen: bool = False
    ended: Optional[Timestamp] = None
    listened: bool = False
    accepted_tokens: list = field(default_factory=list)

    @property
    def mode(self) -> Optional[Mode]:
        return self.modes[-1] if self.modes else None


def file_of_address(state: ProcessState, address: int) -> Optional[FileRef]:
    for r in state.mmap_table:
        if r.start <= address < r.end:
            return r.file
    return None


@dataclass
class Connection:
    token: int
    client_pid: int
    client_fd: int
    server_pid: Optional[int] = None
    server_fd: Optional[int] = None


@dataclass(frozen=True)
class Transition:
    pid: int
    before: Sched
    after: Sched
    ts: Timestamp
    cause: str


@dataclass
class ReplayResult:
    processes: dict
    connections: dict
    transitions: list
    irq_counts: dict
    irq_us: int
    start: Timestamp
    end: Timestamp
    snapshot: Optional[Snapshot] = None


class ReplayObserver:
    """Hooks called by the replayer; the default does nothing."""

    def before_change(self, state: ProcessState, ts: Timestamp):
        """State of ``state`` is about to change at ``ts``."""

    def unblocked(self, state: ProcessState, pending: PendingWait,
                  source: Optional[WaitSource], ts: Timestamp):
        """A blocked interval ended (source None when the trace ends first)."""

    def mode_exited(self, state: ProcessState, mode: Mode, ts: Timestamp):
        pass

    def event(self, ae: AttributedEvent, state: Optional[ProcessState]):
        pass


_SNAP_SCHED = {ProcState.RUNNING: Sched.RUNNING, ProcState.RUNNABLE: Sched.RUNNABLE,
               ProcState.BLOCKED: Sched.BLOCKED}


class Replayer:
    def __init__(self, snapshot: Snapshot, observer: Optional[ReplayObserver] = None):
        try:
            snapshot.validate()
        except ValueError as exc:
            raise TraceInconsistency(f"bad snapshot: {exc}") from None
        self.observer = observer or ReplayObserver()
        self.snapshot = snapshot
        self.start = snapshot.start
        self.end = snapshot.start
        self.procs = {}
        for info in snapshot.processes:
            st = ProcessState(info.pid, info.parent_pid, info.name, _SNAP_SCHED[info.state],
                              snapshot.start)
            if st.sched is Sched.BLOCKED:
                st.pending_wait = PendingWait("generic", snapshot.start, name="unknown")
            self.procs[info.pid] = st
        for p in self.procs.values():
            parent = self.procs.get(p.parent_pid)
            if parent is not None:
                parent.children.add(p.pid)
        self.connections = {}
        self.transitions = []
        self.irq_counts = {}
        self.irq_us = 0
        self._irq_open = {}

    # -- helpers ------------------------------------------------------------

    def _proc(self, pid, ts, what) -> ProcessState:
        st = self.procs.get(pid)
        if st is None:
            raise TraceInconsistency(f"{what} for unknown pid {pid}", ts)
        if st.sched is Sched.EXITED:
            raise TraceInconsistency(f"{what} for exited pid {pid}", ts)
        return st

    def _move(self, st: ProcessState, to: Sched, ts, cause):
        self.observer.before_change(st, ts)
        self.transitions.append(Transition(st.pid, st.sched, to, ts, cause))
        st.sched = to

    def _fd(self, st, fd, ts, what) -> FileRef:
        ref = st.fd_table.get(fd)
        if ref is None:
            raise TraceInconsistency(f"{what} of unknown fd {fd} in pid {st.pid}", ts)
        return ref

    def _note_site(self, st, site: PendingWait):
        m = st.mode
        if m is not None and m.kind == "syscall":
            m.site = site

    # -- event application --------------------------------------------------

    def apply(self, ae: AttributedEvent):
        ts, cpu, pid, k = ae
        self.end = ts
        st = None
        if pid != IDLE_PID:
            st = self._proc(pid, ts, ev.kind_name(k))
        self.observer.event(ae, st)
        handler = self._HANDLERS.get(type(k))
        if handler is not None:
            handler(self, ae, st)
        elif st is None and not isinstance(k, (ev.IrqEntry, ev.IrqExit, ev.Sample)):
            raise TraceInconsistency(f"{ev.kind_name(k)} while cpu {cpu} is idle", ts)

    def _need(self, st, ae):
        if st is None:
            raise TraceInconsistency(f"{ev.kind_name(ae.kind)} while cpu {ae.cpu} is idle", ae.ts)
        return st

    def _sched_change(self, ae, st):
        ts, k = ae.ts, ae.kind
        if st is not None:
            if st.sched is not Sched.RUNNING:
                raise TraceInconsistency(f"pid {st.pid} switched out while {st.sched.value}", ts)
            if k.out_state is OutState.RUNNABLE:
                self._move(st, Sched.RUNNABLE, ts, "preempted")
            elif k.out_state is OutState.BLOCKED:
                self._move(st, Sched.BLOCKED, ts, "blocked")
                st.pending_wait = self._capture(st, ts)
            else:
                self._move(st, Sched.EXITED, ts, "exited")
                st.ended = ts
                st.modes.clear()
        elif k.out_state is not OutState.RUNNABLE:
            raise TraceInconsistency("idle task cannot block or exit", ts)
        if k.in_pid != IDLE_PID:
            q = self._proc(k.in_pid, ts, "SchedChange")
            if q.sched is not Sched.RUNNABLE:
                raise TraceInconsistency(f"pid {q.pid} scheduled in while {q.sched.value}", ts)
            self._move(q, Sched.RUNNING, ts, "scheduled")

    def _capture(self, st, ts) -> PendingWait:
        m = st.mode
        if m is None:
            return PendingWait("generic", ts, name="unknown")
        if m.kind == "trap":
            if m.ident == ev.TRAP_PAGE_FAULT:
                return PendingWait("page_fault", ts, address=m.fault_address, name=m.name)
            return PendingWait("generic", ts, name=m.name)
        if m.site is not None:
            return PendingWait(**{**m.site.__dict__, "blocked_at": ts})
        if m.name == "fork":
            return PendingWait("fork", ts, name=m.name)
        return PendingWait("generic", ts, name=m.name)

    def _wakeup(self, ae, st):
        ts, k = ae.ts, ae.kind
        q = self.procs.get(k.pid)
        if q is None:
            raise TraceInconsistency(f"wakeup of unknown pid {k.pid}", ts)
        if q.sched is not Sched.BLOCKED:
            raise TraceInconsistency(f"wakeup of pid {k.pid} which is {q.sched.value}", ts)
        self.observer.before_change(q, ts)
        self.observer.unblocked(q, q.pending_wait, k.source, ts)
        q.pending_wait = None
        self._move(q, Sched.RUNNABLE, ts, f"woken by {k.source.describe()}")

    def _syscall_entry(self, ae, st):
        st = self._need(st, ae)
        self.observer.before_change(st, ae.ts)
        st.modes.append(Mode("syscall", ae.kind.syscall_id, ae.ts))

    def _trap_entry(self, ae, st):
        st = self._need(st, ae)
        self.observer.before_change(st, ae.ts)
        st.modes.append(Mode("trap", ae.kind.trap_id, ae.ts, ae.kind.fault_address))

    def _mode_exit(self, ae, st, kind):
        st = self._need(st, ae)
        m = st.mode
        if m is None or m.kind != kind:
            raise TraceInconsistency(f"{ev.kind_name(ae.kind)} without matching entry "
                                     f"in pid {st.pid}", ae.ts)
        self.observer.before_change(st, ae.ts)
        st.modes.pop()
        self.observer.mode_exited(st, m, ae.ts)

    def _syscall_exit(self, ae, st):
        self._mode_exit(ae, st, "syscall")

    def _trap_exit(self, ae, st):
        self._mode_exit(ae, st, "trap")

    def _fs_open(self, ae, st):
        st = self._need(st, ae)
        st.fd_table[ae.kind.fd] = FileRef("file", path=ae.kind.path)

    def _fs_close(self, ae, st):
        st = self._need(st, ae)
        self._fd(st, ae.kind.fd, ae.ts, "close")
        del st.fd_table[ae.kind.fd]

    def _fs_read(self, ae, st):
        st = self._need(st, ae)
        self._fd(st, ae.kind.fd, ae.ts, "read")
        self._note_site(st, PendingWait("read", fd=ae.kind.fd))

    def _fs_poll(self, ae, st):
        st = self._need(st, ae)
        self._fd(st, ae.kind.fd, ae.ts, "poll")
        m = st.mode
        fds = m.site.fds if m is not None and m.site is not None and m.site.site == "multiplexed" else ()
        self._note_site(st, PendingWait("multiplexed", fds=fds + (ae.kind.fd,),
                                        name=m.name if m else ""))

    def _fs_poll_timeout(self, ae, st):
        st = self._need(st, ae)
        m = st.mode
        site = m.site if m is not None and m.site is not None and m.site.site == "multiplexed" \
            else PendingWait("multiplexed", name=m.name if m else "")
        self._note_site(st, PendingWait("multiplexed", fds=site.fds,
                                        timeout_us=ae.kind.timeout_us, name=site.name))

    def _fs_exec(self, ae, st):
        st = self._need(st, ae)
        st.name = ae.kind.name

    def _mmap(self, ae, st):
        st = self._need(st, ae)
        k = ae.kind
        ref = None
        if k.backing is not None:
            ref = self._fd(st, k.backing, ae.ts, "mmap")
        lo, hi = k.start_address, k.start_address + k.length
        st.mmap_table = [r for r in st.mmap_table if r.end <= lo or r.start >= hi]
        st.mmap_table.append(MapRange(lo, hi, ref))
        st.mmap_table.sort(key=lambda r: r.start)

    def _munmap(self, ae, st):
        st = self._need(st, ae)
        st.mmap_table = [r for r in st.mmap_table if r.start != ae.kind.start_address]

    def _listen(self, ae, st):
        st = self._need(st, ae)
        st.fd_table[ae.kind.fd] = FileRef("listener", fd=ae.kind.fd)
        st.listened = True

    def _connect(self, ae, st):
        st = self._need(st, ae)
        k = ae.kind
        if k.conn_token in self.connections:
            raise TraceInconsistency(f"connection token {k.conn_token} reused", ae.ts)
        st.fd_table[k.fd] = FileRef("conn", conn_token=k.conn_token)
        self.connections[k.conn_token] = Connection(k.conn_token, st.pid, k.fd)

    def _accept(self, ae, st):
        st = self._need(st, ae)
        k = ae.kind
        ref = self._fd(st, k.listen_fd, ae.ts, "accept")
        if ref.kind != "listener":
            raise TraceInconsistency(f"accept on non-listening fd {k.listen_fd}", ae.ts)
        conn = self.connections.get(k.conn_token)
        if conn is None:
            raise TraceInconsistency(f"accept of unknown connection {k.conn_token}", ae.ts)
        if conn.server_pid is not None:
            raise TraceInconsistency(f"connection {k.conn_token} accepted twice", ae.ts)
        conn.server_pid, conn.server_fd = st.pid, k.new_fd
        st.fd_table[k.new_fd] = FileRef("conn", conn_token=k.conn_token)
        st.accepted_tokens.append(k.conn_token)

    def _fork(self, ae, st):
        st = self._need(st, ae)
        child = ae.kind.child_pid
        if child in self.procs or child == IDLE_PID:
            raise TraceInconsistency(f"fork reuses pid {child}", ae.ts)
        self.procs[child] = ProcessState(child, st.pid, st.name, Sched.RUNNABLE, ae.ts,
                                         fd_table=dict(st.fd_table))
        st.children.add(child)
        self.transitions.append(Transition(child, Sched.RUNNABLE, Sched.RUNNABLE, ae.ts, "forked"))
        self._note_site(st, PendingWait("fork", name="fork"))

    def _exit(self, ae, st):
        st = self._need(st, ae)
        if st.exit_seen:
            raise TraceInconsistency(f"pid {st.pid} exits twice", ae.ts)
        st.exit_seen = True

    def _waitpid(self, ae, st):
        st = self._need(st, ae)
        target = ae.kind.target_pid
        m = st.mode
        if target == 0:
            self._note_site(st, PendingWait("multiplexed", name=m.name if m else ""))
        else:
            self._note_site(st, PendingWait("waitpid", target_pid=target))

    def _timer_expire(self, ae, st):
        if ae.kind.pid not in self.procs:
            raise TraceInconsistency(f"timer expiry for unknown pid {ae.kind.pid}", ae.ts)

    def _irq_entry(self, ae, st):
        irq = ae.kind.irq_id
        self.irq_counts[irq] = self.irq_counts.get(irq, 0) + 1
        self._irq_open.setdefault(ae.cpu, []).append(ae.ts)

    def _irq_exit(self, ae, st):
        stack = self._irq_open.get(ae.cpu)
        if not stack:
            raise TraceInconsistency(f"IrqExit without IrqEntry on cpu {ae.cpu}", ae.ts)
        started = stack.pop()
        self.irq_us += ae.ts.to_us() - started.to_us()

    def _ignore(self, ae, st):
        pass

    _HANDLERS = {
        ev.SchedChange: _sched_change, ev.WakeUp: _wakeup,
        ev.SyscallEntry: _syscall_entry, ev.SyscallExit: _syscall_exit,
        ev.TrapEntry: _trap_entry, ev.TrapExit: _trap_exit,
        ev.FsOpen: _fs_open, ev.FsClose: _fs_close, ev.FsRead: _fs_read,
        ev.FsWrite: lambda self, ae, st: self._need(st, ae),
        ev.FsPoll: _fs_poll, ev.FsPollTimeout: _fs_poll_timeout, ev.FsExec: _fs_exec,
        ev.MemMmap: _mmap, ev.MemMunmap: _munmap,
        ev.SockListen: _listen, ev.SockConnect: _connect, ev.SockAccept: _accept,
        ev.ProcFork: _fork, ev.ProcExit: _exit, ev.ProcWaitpid: _waitpid,
        ev.TimerSet: lambda self, ae, st: self._need(st, ae),
        ev.TimerExpire: _timer_expire,
        ev.IrqEntry: _irq_entry, ev.IrqExit: _irq_exit, ev.Sample: _ignore,
    }

    def finish(self) -> ReplayResult:
        """Close the trace: blocked intervals still open end at the last event."""
        for st in self.procs.values():
            if st.sched is Sched.BLOCKED and st.pending_wait is not None:
                self.observer.before_change(st, self.end)
                self.observer.unblocked(st, st.pending_wait, None, self.end)
            elif st.sched is not Sched.EXITED:
                self.observer.before_change(st, self.end)
        for cpu, stack in self._irq_open.items():
            for started in stack:
                self.irq_us += self.end.to_us() - started.to_us()
            stack.clear()
        return ReplayResult(self.procs, self.connections, self.transitions,
                            dict(sorted(self.irq_counts.items())), self.irq_us,
                            self.start, self.end, self.snapshot)


def replay(attributed, snapshot: Snapshot, observer: Optional[ReplayObserver] = None) -> ReplayResult:
    r = Replayer(snapshot, observer)
    for ae in attributed:
        r.apply(ae)
    return r.finish()


def replay_trace(trace, observer: Optional[ReplayObserver] = None):
    """Attribute and replay a TraceFile; returns (attributed events, ReplayResult)."""
    attributed = attribute_pids(trace.snapshot, trace.per_cpu_events())
    return attributed, replay(attributed, trace.snapshot, observer)
