"""Deterministic workload simulator producing a trace and its ground truth.

Every process runs as a generator that yields CPU requests and blocking
points to a small engine.  Time advances in integer microseconds; at each
instant the engine first delivers device completions on cpu 0 (as an IRQ),
then steps cpu 0, 1, ... in order.  A process made runnable by cpu ``c`` at
time ``t`` may be picked up by a cpu ``c' >= c`` at ``t`` or by any cpu
later, so the merged trace order (time, cpu, position) is always a valid
sequential order of what happened.

Ground truth comes from the engine's own bookkeeping: each process carries
a current accounting bucket that is flushed whenever it changes.  Blocked
time is parked until the wake, when the action that blocked decides which
wait category it belongs to from the actual cause.
"""

from __future__ import annotations

import heapq
import itertools
import random
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import events as ev
from .accounting import (WAIT_CPU, WAIT_FORK, WAIT_TIMEOUT, ServerProfile, WaitBreakdown,
                         WaitCategory, wait_file, wait_generic, wait_process)
from .events import SourceKind, Timestamp, WaitSource
from .profile import SampleHistogram, SymbolTable
from .scenario import (Accept, Close, Compute, Connect, Exec, Exit, Fork, Listen, Mmap, Open,
                       Poll, Read, ReadConn, Scenario, ServeCompute, Sleep, StatLike,
                       TouchPage, WaitChild, Write, basename)
from .traceformat import (DEFAULT_BLOCK_CAPACITY, ProcessInfo, ProcState, Snapshot,
                          TraceFile, build_blocks)

TRACE_EPOCH_US = 1_018_876_582_000_000
IRQ_HANDLER_US = 10
FIRST_PID = 100
INIT_PID = 1
PAGE = 4096
MMAP_BASE = 0x4000_0000
NO_CHILD = -10  # waitpid return value when there is nothing to wait for


class SimulationDeadlock(RuntimeError):
    def __init__(self, time_us: int, blocked):
        super().__init__(f"simulation deadlock at t={time_us}us: "
                         f"pids {sorted(blocked)} blocked with nothing pending")
        self.time_us = time_us
        self.blocked = sorted(blocked)


# -- requests yielded by process generators ---------------------------------

@dataclass
class _Cpu:
    us: int
    user: bool
    fn: Optional[str] = None


@dataclass
class _Block:
    resolve: Callable[[WaitSource], WaitCategory]


_EXIT = object()


# -- simulated kernel objects -----------------------------------------------

class _Conn:
    def __init__(self, token, client_pid, client_fd):
        self.token = token
        self.pid = {"client": client_pid, "server": None}
        self.fd = {"client": client_fd, "server": None}
        self.buf = {"client": 0, "server": 0}  # bytes waiting to be read by that side
        self.closed = {"client": False, "server": False}
        self.reader = {"client": None, "server": None}
        self.pollers = {"client": set(), "server": set()}

    def ready(self, side) -> bool:
        other = "server" if side == "client" else "client"
        return self.buf[side] > 0 or self.closed[other]


class _Listener:
    def __init__(self, pid, fd):
        self.pid = pid
        self.fd = fd
        self.backlog = deque()
        self.acceptor = None
        self.pollers = set()
        self.open = True


@dataclass
class _File:
    kind: str  # file | conn | listener
    path: Optional[str] = None
    conn: Optional[_Conn] = None
    side: Optional[str] = None
    listener: Optional[_Listener] = None
    owner: int = 0

    def display(self) -> str:
        if self.kind == "file":
            return basename(self.path)
        if self.kind == "conn":
            return f"conn:{self.conn.token}"
        return f"listen:{self.listener.fd}"


class _Proc:
    def __init__(self, pid, name, parent, actions):
        self.pid = pid
        self.name = name
        self.sname = name  # scenario name, stable across exec
        self.parent = parent
        self.actions = actions
        self.gen = None
        self.started = False
        self.state = "runnable"
        self.cpu = None
        self.ready = (0, 0)
        self.needs_step = True
        self.resume = None
        self.seg_end = None
        self.seg_left = None
        self.seg_user = False
        self.seg_fn = None
        self.run_start = 0
        self.modes = []  # stack of ("syscall" | "trap", name, entry time)
        self.fds = {}
        self.binds = {}  # name -> fd
        self.child_binds = {}  # name -> child pid
        self.mmaps = {}
        self.next_addr = MMAP_BASE
        self.children = []
        self.zombies = []
        self.waiting = None
        self.fork_child = None
        self.token = 0
        self.resolve = None
        self.bucket = None  # ("run", mode) | ("wait", category) | ("blocked",) | None
        self.since = 0
        self.parked = 0
        self.serving = None
        self.override = None
        self.listened = False
        self.accepted = False
        self.client_cpu = Counter()
        self.start = 0
        self.end = None
        self.bd = WaitBreakdown(pid, name, parent)

    def mode(self):
        return None if not self.modes else self.modes[-1][:2]

    def alloc_fd(self) -> int:
        fd = 3
        while fd in self.fds:
            fd += 1
        return fd


class _CpuState:
    def __init__(self):
        self.pid = 0
        self.slice_start = 0


# -- results ----------------------------------------------------------------

@dataclass
class GroundTruth:
    """What actually happened, from the simulator's own bookkeeping."""

    breakdowns: dict
    servers: dict
    function_fractions: dict
    irq_counts: Counter = field(default_factory=Counter)
    irq_us: int = 0
    end_us: int = 0

    def to_json(self) -> dict:
        return {
            "processes": [self.breakdowns[p].to_json() for p in sorted(self.breakdowns)],
            "servers": [self.servers[p].to_json() for p in sorted(self.servers)],
            "function_fractions": {k: self.function_fractions[k]
                                   for k in sorted(self.function_fractions)},
            "irqs": {ev.irq_name(k): v for k, v in sorted(self.irq_counts.items())},
            "irq_us": self.irq_us,
            "end_us": self.end_us,
        }


@dataclass
class SimulationRun:
    trace: TraceFile
    truth: GroundTruth
    per_cpu_events: dict  # cpu -> [(Timestamp, event)]
    event_pids: dict  # cpu -> [pid the event was emitted under]
    segments: list  # (cpu, start_us, end_us, fn, pid) user-mode compute stretches
    arcs: Counter
    symbols: SymbolTable
    end_us: int

    def merged_pids(self) -> list:
        """Emission pid of each event in the trace's global merge order."""
        def stream(cpu):
            for i, ((ts, _), pid) in enumerate(zip(self.per_cpu_events[cpu],
                                                   self.event_pids[cpu])):
                yield ts.to_us(), cpu, i, pid

        return [pid for *_, pid in heapq.merge(*map(stream, sorted(self.per_cpu_events)))]


@dataclass(frozen=True)
class SamplingPolicy:
    """Fixed period, or a period drawn uniformly from [mean - half_width, mean + half_width]."""

    mode: str = "fixed"
    period_us: int = 10_000
    half_width_us: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "jitter"):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.period_us <= 0:
            raise ValueError("sampling period must be positive")
        if self.mode == "jitter" and not 0 <= self.half_width_us < self.period_us:
            raise ValueError("half width must be below the mean period")

    @classmethod
    def fixed(cls, period_us: int) -> "SamplingPolicy":
        return cls("fixed", period_us)

    @classmethod
    def jittered(cls, mean_us: int, half_width_us: int, seed: int = 0) -> "SamplingPolicy":
        return cls("jitter", mean_us, half_width_us, seed)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "SamplingPolicy":
        """``fixed:<us>`` or ``jitter:<mean>:<half_width>``."""
        parts = text.split(":")
        try:
            if parts[0] == "fixed" and len(parts) == 2:
                return cls.fixed(int(parts[1]))
            if parts[0] == "jitter" and len(parts) == 3:
                return cls.jittered(int(parts[1]), int(parts[2]), seed)
        except ValueError as exc:
            raise ValueError(f"bad sampling policy {text!r}: {exc}") from None
        raise ValueError(f"bad sampling policy {text!r}")

    def instants(self, end_us: int) -> np.ndarray:
        if self.mode == "fixed":
            return np.arange(0, end_us, self.period_us, dtype=np.int64)
        rng = np.random.default_rng(self.seed)
        lo, hi = self.period_us - self.half_width_us, self.period_us + self.half_width_us
        chunks, t = [np.zeros(1, dtype=np.int64)], 0
        while t < end_us:
            n = max(16, (end_us - t) // lo + 1)
            steps = rng.integers(lo, hi + 1, size=n, dtype=np.int64)
            times = t + np.cumsum(steps)
            chunks.append(times)
            t = int(times[-1])
        out = np.concatenate(chunks)
        return out[out < end_us]


# -- symbols ----------------------------------------------------------------

SYMBOL_BASE = 0x0804_8000
SYMBOL_SIZE = 0x100


def scenario_functions(scenario: Scenario) -> list:
    """Synthetic function names in order of first appearance."""
    names = []

    def visit(actions):
        for a in actions:
            if isinstance(a, Compute):
                found = [a.caller, a.fn or "main"]
            elif isinstance(a, ServeCompute):
                found = [a.fn or "serve"]
            elif isinstance(a, Fork):
                visit(a.actions)
                continue
            else:
                continue
            for name in found:
                if name and name not in names:
                    names.append(name)

    for spec in scenario.processes:
        visit(spec.actions)
    return names


def scenario_symbols(scenario: Scenario) -> SymbolTable:
    return SymbolTable.from_names(scenario_functions(scenario), SYMBOL_BASE, SYMBOL_SIZE)


# -- engine -----------------------------------------------------------------

class _Engine:
    def __init__(self, scenario: Scenario, seed: int):
        self.scn = scenario
        self.res = scenario.resources
        self.rng = random.Random(seed)
        self.now = 0
        self.cpus = [_CpuState() for _ in range(self.res.cpu_count)]
        self.events = {c: [] for c in range(self.res.cpu_count)}
        self.event_pids = {c: [] for c in range(self.res.cpu_count)}
        self.procs = {}
        self.order = []
        self.runq = deque()
        self.heap = []
        self.seq = itertools.count()
        self.next_pid = FIRST_PID
        self.next_token = 1
        self.listeners = {}
        self.pending_connects = {}
        self.irq_until = None
        self.irq_start = 0
        self.irq_counts = Counter()
        self.irq_us = 0
        self.segments = []
        self.arcs = Counter()
        self.by_name = {}

    # -- bookkeeping --------------------------------------------------------

    def _new_proc(self, name, parent, actions, forked=False):
        p = _Proc(self.next_pid, name, parent, actions)
        self.next_pid += 1
        p.start = self.now
        p.since = self.now
        p.gen = self._body(p, forked)
        self.procs[p.pid] = p
        self.order.append(p.pid)
        return p

    def _flush(self, p: _Proc):
        d = self.now - p.since
        p.since = self.now
        if d == 0 or p.bucket is None:
            return
        kind = p.bucket[0]
        if kind == "run":
            p.bd.add_running(p.bucket[1], d)
            client = p.override if p.override is not None else p.serving
            p.client_cpu[client] += d
        elif kind == "wait":
            p.bd.add_wait(p.bucket[1], d)
        else:
            p.parked += d

    def _set_bucket(self, p, bucket):
        self._flush(p)
        p.bucket = bucket

    def _running_bucket(self, p):
        return ("run", p.mode())

    def _emit(self, cpu: int, kind):
        self.events[cpu].append((Timestamp.from_us(TRACE_EPOCH_US + self.now), kind))
        pid = self.cpus[cpu].pid
        self.event_pids[cpu].append(pid)
        if pid:
            self.procs[pid].bd.counters[ev.kind_name(kind)] += 1

    def emit(self, p: _Proc, kind):
        self._emit(p.cpu, kind)

    def _at(self, delay, irq, action, guard=None):
        heapq.heappush(self.heap, (self.now + delay, next(self.seq), irq, action, guard))

    # -- scheduling ---------------------------------------------------------

    def _eligible(self, q, t, c):
        rt, rc = q.ready
        return t > rt or (t == rt and c >= rc)

    def _pick(self, t, c):
        for q in self.runq:
            if self._eligible(q, t, c):
                self.runq.remove(q)
                return q
        return None

    def _enqueue(self, p, c):
        p.state = "runnable"
        p.ready = (self.now, c)
        self.runq.append(p)

    def _record_segment(self, p, c):
        if p.seg_user and self.now > p.run_start:
            self.segments.append((c, p.run_start, self.now, p.seg_fn, p.pid))

    def _switch(self, c, out: Optional[_Proc], out_state, q: Optional[_Proc]):
        self._emit(c, ev.SchedChange(q.pid if q else 0, out.pid if out else 0, out_state))
        if out is not None:
            if out.seg_end is not None:
                self._record_segment(out, c)
                out.seg_left = out.seg_end - self.now
                out.seg_end = None
            out.cpu = None
            if out_state is ev.OutState.RUNNABLE:
                self._set_bucket(out, ("wait", WAIT_CPU))
                self._enqueue(out, c)
            elif out_state is ev.OutState.BLOCKED:
                self._set_bucket(out, ("blocked",))
                out.state = "blocked"
            else:
                self._set_bucket(out, None)
                out.state = "exited"
                out.end = self.now
        cpu = self.cpus[c]
        cpu.pid = q.pid if q else 0
        cpu.slice_start = self.now
        if q is not None:
            q.state = "running"
            q.cpu = c
            self._set_bucket(q, self._running_bucket(q))
            if q.seg_left is not None:
                q.seg_end = self.now + q.seg_left
                q.seg_left = None
                q.run_start = self.now

    def _wake(self, q: _Proc, source: WaitSource, cpu: int):
        """Make a blocked process runnable; the event is emitted on ``cpu``."""
        self._emit(cpu, ev.WakeUp(q.pid, source))
        self._flush(q)
        q.bd.add_wait(q.resolve(source), q.parked)
        q.parked = 0
        q.resolve = None
        q.bucket = ("wait", WAIT_CPU)
        q.resume = source
        q.needs_step = True
        self._enqueue(q, cpu)

    def _advance(self, p: _Proc, c: int):
        p.needs_step = False
        value = p.resume if p.started else None
        p.resume = None
        p.started = True
        while True:
            req = p.gen.send(value)
            value = None
            if isinstance(req, _Cpu):
                if req.us <= 0:
                    continue
                p.seg_end = self.now + req.us
                p.seg_user = req.user
                p.seg_fn = req.fn
                p.run_start = self.now
                return
            if isinstance(req, _Block):
                p.resolve = req.resolve
                self._switch(c, p, ev.OutState.BLOCKED, self._pick(self.now, c))
                return
            if req is _EXIT:
                self._switch(c, p, ev.OutState.EXITED, self._pick(self.now, c))
                return
            raise AssertionError(f"bad request {req!r}")

    def _step_cpu(self, t, c):
        cpu = self.cpus[c]
        if c == 0:
            if self.irq_until == t:
                self._emit(0, ev.IrqExit())
                self.irq_us += t - self.irq_start
                self.irq_until = None
                if cpu.pid:
                    p = self.procs[cpu.pid]
                    if p.seg_left is not None:
                        p.seg_end = t + p.seg_left
                        p.seg_left = None
                        p.run_start = t
            while self.heap and self.heap[0][0] == t:
                _, _, irq, action, guard = heapq.heappop(self.heap)
                if guard is not None and not guard():
                    continue
                if self.irq_until is None:
                    self._emit(0, ev.IrqEntry(irq))
                    if cpu.pid:
                        p = self.procs[cpu.pid]
                        if p.seg_end is not None:
                            self._record_segment(p, 0)
                            p.seg_left = p.seg_end - t
                            p.seg_end = None
                    self.irq_until = t + IRQ_HANDLER_US
                    self.irq_start = t
                else:
                    self.irq_until = max(self.irq_until, t + IRQ_HANDLER_US)
                self.irq_counts[irq] += 1
                action()
            if self.irq_until is not None:
                return
        while True:
            if cpu.pid:
                p = self.procs[cpu.pid]
                if p.seg_end is not None and p.seg_end <= t:
                    self._record_segment(p, c)
                    p.seg_end = None
                    p.needs_step = True
                if p.needs_step:
                    self._advance(p, c)
                    continue
                if (p.seg_user and p.seg_end is not None
                        and t >= cpu.slice_start + self.res.quantum_us):
                    q = self._pick(t, c)
                    if q is not None:
                        self._switch(c, p, ev.OutState.RUNNABLE, q)
                        continue
                return
            q = self._pick(t, c)
            if q is None:
                return
            self._switch(c, None, ev.OutState.RUNNABLE, q)

    def _earliest_eligible(self, c, t):
        best = None
        for q in self.runq:
            rt, rc = q.ready
            e = rt if c >= rc else rt + 1
            best = e if best is None else min(best, e)
        return None if best is None else max(best, t + 1)

    def _next_time(self, t):
        cands = []
        if self.heap:
            cands.append(self.heap[0][0])
        if self.irq_until is not None:
            cands.append(self.irq_until)
        for c, cpu in enumerate(self.cpus):
            if cpu.pid:
                p = self.procs[cpu.pid]
                if p.seg_end is not None:
                    cands.append(p.seg_end)
                    if p.seg_user and self.runq:
                        e = self._earliest_eligible(c, t)
                        cands.append(max(e, cpu.slice_start + self.res.quantum_us))
            elif self.runq:
                cands.append(self._earliest_eligible(c, t))
        cands = [x for x in cands if x > t]
        return min(cands) if cands else None

    def run(self):
        for spec in self.scn.processes:
            p = self._new_proc(spec.name, INIT_PID, spec.actions)
            self.by_name.setdefault(spec.name, p.pid)
            if spec.start_delay_us == 0:
                p.bucket = ("wait", WAIT_CPU)
                self.runq.append(p)
            else:
                p.state = "blocked"
                p.bucket = ("blocked",)
                p.resolve = lambda s: wait_generic("unknown")
                self._at(spec.start_delay_us, ev.IRQ_TIMER, self._timer_wake(p, p.token),
                         self._guard(p, p.token))
        self.snapshot = Snapshot(
            [ProcessInfo(p.pid, p.parent, p.name,
                         ProcState.RUNNABLE if p.state == "runnable" else ProcState.BLOCKED)
             for p in self.procs.values()],
            {c: 0 for c in range(len(self.cpus))},
            Timestamp.from_us(TRACE_EPOCH_US))
        t = 0
        while True:
            self.now = t
            for c in range(len(self.cpus)):
                self._step_cpu(t, c)
            live = [p for p in self.procs.values() if p.state != "exited"]
            if not live and self.irq_until is None:
                break
            nt = self._next_time(t)
            if nt is None:
                raise SimulationDeadlock(t, [p.pid for p in live])
            t = nt
        self.end = t

    # -- wake helpers -------------------------------------------------------

    def _guard(self, p, token):
        return lambda: p.state == "blocked" and p.token == token

    def _timer_wake(self, p, token):
        def fire():
            self._emit(0, ev.TimerExpire(p.pid))
            self._wake(p, WaitSource(SourceKind.TIMER), 0)
        return fire

    def _device_wake(self, p, source, then=None):
        def fire():
            self._wake(p, source, 0)
            if then is not None:
                then()
        return fire

    def _block(self, p, resolve, timers=()):
        """Block ``p``; ``timers`` are (delay, irq, fire-factory) completions."""
        p.token += 1
        for delay, irq, make in timers:
            self._at(delay, irq, make(p.token), self._guard(p, p.token))
        source = yield _Block(resolve)
        return source

    def _wake_if_blocked(self, q_pid, source, cpu):
        if q_pid is None:
            return
        q = self.procs[q_pid]
        if q.state == "blocked":
            q.token += 1
            self._wake(q, source, cpu)

    def _latency(self, path):
        base = self.res.file_latency(path) if path else self.res.anon_fault_latency_us
        if self.res.latency_jitter_us:
            base += self.rng.randint(0, self.res.latency_jitter_us)
        return base

    # -- modes --------------------------------------------------------------

    def _sys_enter(self, p, name, arg=0):
        self.emit(p, ev.SyscallEntry(ev.SYSCALL_IDS[name], arg))
        self._flush(p)
        p.modes.append(("syscall", name, self.now))
        p.bucket = self._running_bucket(p)
        p.bd.syscall_calls[name] += 1

    def _trap_enter(self, p, trap, addr):
        name = ev.trap_name(trap)
        self.emit(p, ev.TrapEntry(trap, addr))
        self._flush(p)
        p.modes.append(("trap", name, self.now))
        p.bucket = self._running_bucket(p)
        p.bd.trap_calls[name] += 1

    def _mode_exit(self, p, kind):
        self._flush(p)
        mkind, name, t0 = p.modes.pop()
        assert mkind == ("syscall" if isinstance(kind, ev.SyscallExit) else "trap")
        target = p.bd.syscall_elapsed_us if mkind == "syscall" else p.bd.trap_elapsed_us
        target[name] += self.now - t0
        self.emit(p, kind)
        p.bucket = self._running_bucket(p)

    def _cost(self):
        return _Cpu(self.res.syscall_cost_us, False)

    # -- process bodies -----------------------------------------------------

    def _body(self, p: _Proc, forked: bool):
        if forked:
            parent = self.procs[p.parent]
            if parent.fork_child == p.pid:
                parent.fork_child = None
                self._wake_if_blocked(parent.pid, WaitSource(SourceKind.PROCESS, p.pid), p.cpu)
        for a in p.actions:
            if isinstance(a, Exit):
                yield from self._do_exit(p, a.code)
                return
            yield from self._HANDLERS[type(a)](self, p, a)
        yield from self._do_exit(p, 0)

    def _do_compute(self, p, a: Compute):
        fn = a.fn or "main"
        if a.caller:
            self.arcs[(a.caller, fn)] += 1
        yield _Cpu(a.duration_us, True, fn)

    def _open_fd(self, p, path):
        self._sys_enter(p, "open")
        yield self._cost()
        fd = p.alloc_fd()
        p.fds[fd] = _File("file", path=path, owner=p.pid)
        self.emit(p, ev.FsOpen(fd, path))
        self._mode_exit(p, ev.SyscallExit(fd))
        return fd

    def _do_open(self, p, a: Open):
        fd = yield from self._open_fd(p, a.path)
        p.binds[a.bind] = fd

    def _close_fd(self, p, fd):
        self._sys_enter(p, "close", fd)
        yield self._cost()
        self.emit(p, ev.FsClose(fd))
        self._release(p, fd)
        self._mode_exit(p, ev.SyscallExit(0))

    def _do_close(self, p, a: Close):
        fd = p.binds.pop(a.ref)
        yield from self._close_fd(p, fd)

    def _release(self, p, fd):
        f = p.fds.pop(fd)
        if f.owner != p.pid:
            return
        if f.kind == "conn":
            conn, side = f.conn, f.side
            other = "server" if side == "client" else "client"
            conn.closed[side] = True
            self._notify_conn(conn, other, p.cpu)
        elif f.kind == "listener":
            lst = f.listener
            lst.open = False
            if self.listeners.get(p.sname) is lst:
                del self.listeners[p.sname]
            while lst.backlog:
                conn = lst.backlog.popleft()
                conn.closed["server"] = True
                self._notify_conn(conn, "client", p.cpu)

    def _notify_conn(self, conn, side, cpu):
        """Data or EOF became available to ``side`` of the connection."""
        fd = conn.fd[side]
        for pid in [conn.reader[side], *sorted(conn.pollers[side])]:
            if pid is not None:
                self._wake_if_blocked(pid, WaitSource(SourceKind.FILE, fd), cpu)

    def _do_read(self, p, a: Read):
        fd = p.binds[a.ref]
        f = p.fds[fd]
        self._sys_enter(p, "read", a.nbytes)
        self.emit(p, ev.FsRead(fd, a.nbytes))
        yield self._cost()
        name = f.display()
        yield from self._block(p, lambda s: wait_file(name), [
            (self._latency(f.path), ev.IRQ_DISK,
             lambda tok: self._device_wake(p, WaitSource(SourceKind.FILE, fd)))])
        self._mode_exit(p, ev.SyscallExit(a.nbytes))

    def _do_write(self, p, a: Write):
        fd = p.binds[a.ref]
        f = p.fds[fd]
        self._sys_enter(p, "write", a.nbytes)
        self.emit(p, ev.FsWrite(fd, a.nbytes))
        yield self._cost()
        if f.kind == "conn":
            other = "server" if f.side == "client" else "client"
            if not f.conn.closed[other]:
                f.conn.buf[other] += a.nbytes
                self._notify_conn(f.conn, other, p.cpu)
        self._mode_exit(p, ev.SyscallExit(a.nbytes))

    def _do_readconn(self, p, a: ReadConn):
        fd = p.binds[a.ref]
        f = p.fds[fd]
        conn, side = f.conn, f.side
        other = "server" if side == "client" else "client"
        self._sys_enter(p, "read", a.nbytes)
        self.emit(p, ev.FsRead(fd, a.nbytes))
        if side == "server":
            self._flush(p)
            p.serving = conn.pid["client"]
        yield self._cost()
        name = f.display()
        while True:
            if conn.buf[side] > 0:
                got = min(conn.buf[side], a.nbytes)
                conn.buf[side] -= got
                break
            if conn.closed[other]:
                got = 0
                break
            conn.reader[side] = p.pid
            yield from self._block(p, lambda s: wait_file(name))
            conn.reader[side] = None
        self._mode_exit(p, ev.SyscallExit(got))

    def _do_mmap(self, p, a: Mmap):
        fd = None
        if a.path is not None:
            fd = yield from self._open_fd(p, a.path)
        self._sys_enter(p, "mmap", a.length)
        yield self._cost()
        addr = p.next_addr
        p.next_addr += (a.length + PAGE - 1) // PAGE * PAGE + PAGE
        p.mmaps[a.bind] = (addr, a.length, a.path)
        self.emit(p, ev.MemMmap(addr, a.length, fd))
        self._mode_exit(p, ev.SyscallExit(addr))
        if fd is not None:
            yield from self._close_fd(p, fd)

    def _do_touch(self, p, a: TouchPage):
        start, _, path = p.mmaps[a.ref]
        addr = start + a.offset
        self._trap_enter(p, ev.TRAP_PAGE_FAULT, addr)
        yield self._cost()
        if path is None:
            resolve = lambda s: wait_generic(ev.trap_name(ev.TRAP_PAGE_FAULT))  # noqa: E731
        else:
            name = basename(path)
            resolve = lambda s: wait_file(name)  # noqa: E731
        yield from self._block(p, resolve, [
            (self._latency(path), ev.IRQ_DISK,
             lambda tok: self._device_wake(p, WaitSource(SourceKind.PAGE, addr)))])
        self._mode_exit(p, ev.TrapExit())

    def _do_poll(self, p, a: Poll):
        fds = [p.binds[r] for r in a.refs]
        self._sys_enter(p, "poll", len(fds))
        for fd in fds:
            self.emit(p, ev.FsPoll(fd))
        self.emit(p, ev.FsPollTimeout(a.timeout_us))
        yield self._cost()
        ready = None
        for fd in fds:
            f = p.fds[fd]
            if f.kind == "conn" and f.conn.ready(f.side):
                ready = fd
            elif f.kind == "listener" and f.listener.backlog:
                ready = fd
            if ready is not None:
                break
        if ready is not None:
            self._mode_exit(p, ev.SyscallExit(1))
            return
        timers = []
        for fd in fds:
            f = p.fds[fd]
            if f.kind == "file":
                timers.append((self._latency(f.path), ev.IRQ_DISK,
                               lambda tok, fd=fd: self._device_wake(
                                   p, WaitSource(SourceKind.FILE, fd))))
            elif f.kind == "conn":
                f.conn.pollers[f.side].add(p.pid)
            else:
                f.listener.pollers.add(p.pid)
        if a.timeout_us:
            self.emit(p, ev.TimerSet(Timestamp.from_us(TRACE_EPOCH_US + self.now + a.timeout_us)))
            timers.append((a.timeout_us, ev.IRQ_TIMER, lambda tok: self._timer_wake(p, tok)))
        names = {fd: p.fds[fd].display() for fd in fds}

        def resolve(s):
            if s.kind is SourceKind.TIMER:
                return WAIT_TIMEOUT
            return wait_file(names[s.ref])

        source = yield from self._block(p, resolve, timers)
        for fd in fds:
            f = p.fds.get(fd)
            if f is None:
                continue
            if f.kind == "conn":
                f.conn.pollers[f.side].discard(p.pid)
            elif f.kind == "listener":
                f.listener.pollers.discard(p.pid)
        self._mode_exit(p, ev.SyscallExit(0 if source.kind is SourceKind.TIMER else 1))

    def _do_sleep(self, p, a: Sleep):
        self._sys_enter(p, "nanosleep", a.duration_us)
        yield self._cost()
        self.emit(p, ev.TimerSet(Timestamp.from_us(TRACE_EPOCH_US + self.now + a.duration_us)))
        yield from self._block(p, lambda s: wait_generic("nanosleep"), [
            (a.duration_us, ev.IRQ_TIMER, lambda tok: self._timer_wake(p, tok))])
        self._mode_exit(p, ev.SyscallExit(0))

    def _do_statlike(self, p, a: StatLike):
        self._sys_enter(p, "stat")
        yield self._cost()
        yield from self._block(p, lambda s: wait_generic("stat"), [
            (a.duration_us, ev.IRQ_DISK,
             lambda tok: self._device_wake(p, WaitSource(SourceKind.DEVICE)))])
        self._mode_exit(p, ev.SyscallExit(0))

    def _do_fork(self, p, a: Fork):
        self._sys_enter(p, "fork")
        yield self._cost()
        child = self._new_proc(p.name, p.pid, a.actions, forked=True)
        child.fds = dict(p.fds)
        child.binds = {k: fd for k, fd in p.binds.items() if p.fds[fd].kind == "file"}
        child.bucket = ("wait", WAIT_CPU)
        self._enqueue(child, p.cpu)
        p.children.append(child.pid)
        p.fork_child = child.pid
        if a.bind:
            p.child_binds[a.bind] = child.pid
        self.emit(p, ev.ProcFork(child.pid))
        yield from self._block(p, lambda s: WAIT_FORK)
        self._mode_exit(p, ev.SyscallExit(child.pid))

    def _do_waitchild(self, p, a: WaitChild):
        target = p.child_binds[a.ref] if a.ref is not None else None
        if target is None:
            self._sys_enter(p, "wait4")
            self.emit(p, ev.ProcWaitpid(0))
        else:
            self._sys_enter(p, "waitpid", target)
            self.emit(p, ev.ProcWaitpid(target))
        yield self._cost()
        live = [c for c in p.children if self.procs[c].state != "exited"]
        if target is None:
            if p.zombies:
                got = p.zombies.pop(0)
            elif live:
                p.waiting = "any"
                source = yield from self._block(p, lambda s: wait_process(s.ref))
                got = source.ref
            else:
                got = NO_CHILD
        else:
            if target in p.zombies:
                p.zombies.remove(target)
                got = target
            elif target in live:
                p.waiting = target
                yield from self._block(p, lambda s: wait_process(target))
                got = target
            else:
                got = NO_CHILD
        p.waiting = None
        if got != NO_CHILD:
            p.children.remove(got)
        self._mode_exit(p, ev.SyscallExit(got))

    def _do_listen(self, p, a: Listen):
        self._sys_enter(p, "listen")
        yield self._cost()
        fd = p.alloc_fd()
        lst = _Listener(p.pid, fd)
        p.fds[fd] = _File("listener", listener=lst, owner=p.pid)
        p.binds[a.bind] = fd
        p.listened = True
        self.listeners.setdefault(p.sname, lst)
        if self.listeners[p.sname] is lst:
            lst.backlog.extend(self.pending_connects.pop(p.sname, ()))
        self.emit(p, ev.SockListen(fd))
        self._mode_exit(p, ev.SyscallExit(0))

    def _do_connect(self, p, a: Connect):
        self._sys_enter(p, "connect")
        fd = p.alloc_fd()
        conn = _Conn(self.next_token, p.pid, fd)
        self.next_token += 1
        p.fds[fd] = _File("conn", conn=conn, side="client", owner=p.pid)
        p.binds[a.bind] = fd
        self.emit(p, ev.SockConnect(fd, conn.token))
        yield self._cost()
        yield from self._block(p, lambda s: wait_generic("connect"), [
            (self.res.connect_latency_us, ev.IRQ_NET,
             lambda tok: self._device_wake(p, WaitSource(SourceKind.DEVICE),
                                           lambda: self._arrive(conn, a.server)))])
        self._mode_exit(p, ev.SyscallExit(0))

    def _arrive(self, conn, server):
        lst = self.listeners.get(server)
        if lst is None:
            target = self.procs.get(self.by_name.get(server))
            if target is None or target.state == "exited":
                conn.closed["server"] = True
                return
            self.pending_connects.setdefault(server, []).append(conn)
            return
        lst.backlog.append(conn)
        src = WaitSource(SourceKind.FILE, lst.fd)
        for pid in [lst.acceptor, *sorted(lst.pollers)]:
            if pid is not None:
                self._wake_if_blocked(pid, src, 0)

    def _do_accept(self, p, a: Accept):
        lfd = p.binds[a.ref]
        lst = p.fds[lfd].listener
        self._sys_enter(p, "accept", lfd)
        yield self._cost()
        while not lst.backlog:
            lst.acceptor = p.pid
            yield from self._block(p, lambda s: wait_generic("accept"))
            lst.acceptor = None
        conn = lst.backlog.popleft()
        fd = p.alloc_fd()
        conn.pid["server"] = p.pid
        conn.fd["server"] = fd
        p.fds[fd] = _File("conn", conn=conn, side="server", owner=p.pid)
        p.binds[a.bind] = fd
        self.emit(p, ev.SockAccept(lfd, fd, conn.token))
        self._flush(p)
        p.serving = conn.pid["client"]
        p.accepted = True
        self._mode_exit(p, ev.SyscallExit(fd))

    def _do_servecompute(self, p, a: ServeCompute):
        self._flush(p)
        if a.for_ref is not None:
            f = p.fds[p.binds[a.for_ref]]
            peer = "client" if f.side == "server" else "server"
            p.override = f.conn.pid[peer]
        yield _Cpu(a.duration_us, True, a.fn or "serve")
        self._flush(p)
        p.override = None

    def _do_exec(self, p, a: Exec):
        self._sys_enter(p, "execve")
        yield self._cost()
        self.emit(p, ev.FsExec(a.name))
        p.name = a.name
        p.bd.name = a.name
        self._mode_exit(p, ev.SyscallExit(0))

    def _do_exit(self, p, code):
        self.emit(p, ev.ProcExit(code))
        for fd in sorted(p.fds):
            self._release(p, fd)
        if self.by_name.get(p.sname) == p.pid:
            for conn in self.pending_connects.pop(p.sname, ()):
                conn.closed["server"] = True
                self._notify_conn(conn, "client", p.cpu)
        parent = self.procs.get(p.parent)
        if parent is not None and parent.state != "exited":
            if parent.state == "blocked" and parent.waiting in ("any", p.pid):
                self._wake_if_blocked(parent.pid, WaitSource(SourceKind.PROCESS, p.pid), p.cpu)
            else:
                parent.zombies.append(p.pid)
        yield _EXIT

    _HANDLERS = {
        Compute: _do_compute, Open: _do_open, Close: _do_close, Read: _do_read,
        Write: _do_write, ReadConn: _do_readconn, Mmap: _do_mmap, TouchPage: _do_touch,
        Poll: _do_poll, Sleep: _do_sleep, StatLike: _do_statlike, Fork: _do_fork,
        WaitChild: _do_waitchild, Listen: _do_listen, Connect: _do_connect,
        Accept: _do_accept, ServeCompute: _do_servecompute, Exec: _do_exec,
    }

    # -- results ------------------------------------------------------------

    def truth(self) -> GroundTruth:
        breakdowns, servers = {}, {}
        for pid in self.order:
            p = self.procs[pid]
            end = p.end if p.end is not None else self.end
            p.bd.elapsed_us = end - p.start
            if not p.bd.conserved():
                raise AssertionError(f"simulator bookkeeping lost time for pid {pid}")
            breakdowns[pid] = p.bd
            if p.listened and p.accepted:
                prof = ServerProfile(pid, p.name)
                for client, us in p.client_cpu.items():
                    prof.add(client, us)
                servers[pid] = prof
        totals = Counter()
        for _, s, e, fn, _ in self.segments:
            totals[fn] += e - s
        whole = sum(totals.values())
        fractions = {fn: us / whole for fn, us in totals.items()} if whole else {}
        return GroundTruth(breakdowns, servers, fractions, Counter(self.irq_counts),
                           self.irq_us, self.end)


def simulate(scenario: Scenario, seed: int = 0,
             block_capacity: int = DEFAULT_BLOCK_CAPACITY) -> SimulationRun:
    eng = _Engine(scenario, seed)
    eng.run()
    blocks = build_blocks(eng.events, block_capacity)
    trace = TraceFile(eng.snapshot, blocks, block_capacity)
    return SimulationRun(trace, eng.truth(), eng.events, eng.event_pids, eng.segments,
                         eng.arcs, scenario_symbols(scenario), eng.end)


def run_simulation(scenario: Scenario, seed: int = 0,
                   block_capacity: int = DEFAULT_BLOCK_CAPACITY):
    """Run a scenario; returns (TraceFile, GroundTruth)."""
    run = simulate(scenario, seed, block_capacity)
    return run.trace, run.truth


def emit_samples(run: SimulationRun, policy: SamplingPolicy,
                 symbols: Optional[SymbolTable] = None) -> SampleHistogram:
    """Sample the running synthetic function at each instant of ``policy``.

    Every cpu is sampled at every instant; only user-mode compute counts.
    """
    symbols = symbols or run.symbols
    hist = SampleHistogram.for_symbols(symbols, period_s=policy.period_us / 1e6)
    if not run.segments:
        return hist
    instants = policy.instants(run.end_us)
    by_cpu = {}
    for c, s, e, fn, _ in run.segments:
        by_cpu.setdefault(c, []).append((s, e, fn))
    for segs in by_cpu.values():
        segs.sort()
        starts = np.array([s for s, _, _ in segs], dtype=np.int64)
        ends = np.array([e for _, e, _ in segs], dtype=np.int64)
        idx = np.searchsorted(starts, instants, side="right") - 1
        ok = idx >= 0
        ok[ok] = instants[ok] < ends[idx[ok]]
        hits = Counter(idx[ok].tolist())
        for i, n in hits.items():
            hist.record(symbols.address_of(segs[i][2]), n)
    return hist
