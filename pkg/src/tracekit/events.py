"""Kernel-style event vocabulary shared by the trace format, simulator and analyzers."""

from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import Optional, Union

MICROS_PER_SECOND = 1_000_000


@dataclass(frozen=True, order=True, slots=True)
class Timestamp:
    """Absolute time as seconds since epoch plus microseconds."""

    seconds: int
    micros: int

    def __post_init__(self):
        if not 0 <= self.micros < MICROS_PER_SECOND:
            raise ValueError(f"micros out of range: {self.micros}")
        if self.seconds < 0:
            raise ValueError(f"negative seconds: {self.seconds}")

    @classmethod
    def from_us(cls, total_us: int) -> "Timestamp":
        s, us = divmod(total_us, MICROS_PER_SECOND)
        return cls(s, us)

    def to_us(self) -> int:
        return self.seconds * MICROS_PER_SECOND + self.micros

    def __str__(self):
        return f"{self.seconds}.{self.micros:06d}"


class OutState(enum.IntEnum):
    RUNNABLE = 0
    BLOCKED = 1
    EXITED = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()


class SourceKind(enum.IntEnum):
    FILE = 0  # ref is a descriptor of the woken process
    PROCESS = 1  # ref is a pid
    TIMER = 2
    PAGE = 3  # ref is the faulting address
    DEVICE = 4  # generic device completion


@dataclass(frozen=True, slots=True)
class WaitSource:
    kind: SourceKind
    ref: int = 0

    def describe(self) -> str:
        if self.kind is SourceKind.FILE:
            return f"File:{self.ref}"
        if self.kind is SourceKind.PROCESS:
            return f"Process:{self.ref}"
        if self.kind is SourceKind.PAGE:
            return f"Page:0x{self.ref:08X}"
        return self.kind.name.capitalize()


# Syscall numbers follow the i386 table where one exists.
SYSCALL_NAMES = {
    0: "unknown",
    1: "exit",
    2: "fork",
    3: "read",
    4: "write",
    5: "open",
    6: "close",
    7: "waitpid",
    11: "execve",
    91: "munmap",
    106: "stat",
    114: "wait4",
    162: "nanosleep",
    168: "poll",
    192: "mmap",
    362: "connect",
    363: "listen",
    364: "accept",
}
SYSCALL_IDS = {name: num for num, name in SYSCALL_NAMES.items()}

TRAP_PAGE_FAULT = 14
TRAP_NAMES = {TRAP_PAGE_FAULT: "page_fault"}

IRQ_TIMER = 0
IRQ_NET = 11
IRQ_DISK = 14
IRQ_NAMES = {IRQ_TIMER: "timer", IRQ_NET: "eth0", IRQ_DISK: "ide0"}


def syscall_name(num: int) -> str:
    return SYSCALL_NAMES.get(num, f"sys_{num}")


def trap_name(num: int) -> str:
    return TRAP_NAMES.get(num, f"trap_{num}")


def irq_name(num: int) -> str:
    return IRQ_NAMES.get(num, f"irq_{num}")


@dataclass(frozen=True, slots=True)
class SchedChange:
    in_pid: int
    out_pid: int
    out_state: OutState


@dataclass(frozen=True, slots=True)
class WakeUp:
    pid: int
    source: WaitSource


@dataclass(frozen=True, slots=True)
class SyscallEntry:
    syscall_id: int
    arg: int = 0


@dataclass(frozen=True, slots=True)
class SyscallExit:
    return_value: int = 0


@dataclass(frozen=True, slots=True)
class TrapEntry:
    trap_id: int
    fault_address: int


@dataclass(frozen=True, slots=True)
class TrapExit:
    pass


@dataclass(frozen=True, slots=True)
class FsOpen:
    fd: int
    path: str


@dataclass(frozen=True, slots=True)
class FsClose:
    fd: int


@dataclass(frozen=True, slots=True)
class FsRead:
    fd: int
    byte_count: int


@dataclass(frozen=True, slots=True)
class FsWrite:
    fd: int
    byte_count: int


@dataclass(frozen=True, slots=True)
class FsPoll:
    fd: int


@dataclass(frozen=True, slots=True)
class FsPollTimeout:
    timeout_us: int


@dataclass(frozen=True, slots=True)
class FsExec:
    name: str


@dataclass(frozen=True, slots=True)
class MemMmap:
    start_address: int
    length: int
    backing: Optional[int]  # None means anonymous memory


@dataclass(frozen=True, slots=True)
class MemMunmap:
    start_address: int


@dataclass(frozen=True, slots=True)
class SockListen:
    fd: int


@dataclass(frozen=True, slots=True)
class SockConnect:
    fd: int
    conn_token: int


@dataclass(frozen=True, slots=True)
class SockAccept:
    listen_fd: int
    new_fd: int
    conn_token: int


@dataclass(frozen=True, slots=True)
class ProcFork:
    child_pid: int


@dataclass(frozen=True, slots=True)
class ProcExit:
    code: int = 0


@dataclass(frozen=True, slots=True)
class ProcWaitpid:
    target_pid: int  # 0 waits for any child


@dataclass(frozen=True, slots=True)
class TimerSet:
    expiry: Timestamp


@dataclass(frozen=True, slots=True)
class TimerExpire:
    pid: int


@dataclass(frozen=True, slots=True)
class IrqEntry:
    irq_id: int


@dataclass(frozen=True, slots=True)
class IrqExit:
    pass


@dataclass(frozen=True, slots=True)
class Sample:
    instruction_address: int


EventKind = Union[
    SchedChange, WakeUp, SyscallEntry, SyscallExit, TrapEntry, TrapExit,
    FsOpen, FsClose, FsRead, FsWrite, FsPoll, FsPollTimeout, FsExec,
    MemMmap, MemMunmap, SockListen, SockConnect, SockAccept,
    ProcFork, ProcExit, ProcWaitpid, TimerSet, TimerExpire,
    IrqEntry, IrqExit, Sample,
]

EVENT_CODES = {
    SchedChange: 1, WakeUp: 2, SyscallEntry: 3, SyscallExit: 4,
    TrapEntry: 5, TrapExit: 6, FsOpen: 7, FsClose: 8, FsRead: 9,
    FsWrite: 10, FsPoll: 11, FsPollTimeout: 12, FsExec: 13, MemMmap: 14,
    MemMunmap: 15, SockListen: 16, SockConnect: 17, SockAccept: 18,
    ProcFork: 19, ProcExit: 20, ProcWaitpid: 21, TimerSet: 22,
    TimerExpire: 23, IrqEntry: 24, IrqExit: 25, Sample: 26,
}
EVENT_TYPES = {code: cls for cls, code in EVENT_CODES.items()}


def kind_name(event) -> str:
    return type(event).__name__


def describe(event) -> str:
    """Payload text used by trace dumps."""
    if isinstance(event, SchedChange):
        return f"IN:{event.in_pid} OUT:{event.out_pid} STATE:{event.out_state.label}"
    if isinstance(event, WakeUp):
        return f"PID:{event.pid} SOURCE:{event.source.describe()}"
    if isinstance(event, SyscallEntry):
        return f"SYSCALL:{syscall_name(event.syscall_id)} ARG:{event.arg}"
    if isinstance(event, SyscallExit):
        return f"RET:{event.return_value}"
    if isinstance(event, TrapEntry):
        return f"TRAP:{trap_name(event.trap_id)} ADDR:0x{event.fault_address:08X}"
    if isinstance(event, (MemMmap,)):
        backing = "ANON" if event.backing is None else f"FD:{event.backing}"
        return f"START:0x{event.start_address:08X} LENGTH:{event.length} BACKING:{backing}"
    if isinstance(event, MemMunmap):
        return f"START:0x{event.start_address:08X}"
    if isinstance(event, SockAccept):
        return f"LISTEN:{event.listen_fd} FD:{event.new_fd} CONN:{event.conn_token}"
    if isinstance(event, SockConnect):
        return f"FD:{event.fd} CONN:{event.conn_token}"
    if isinstance(event, IrqEntry):
        return f"IRQ:{irq_name(event.irq_id)}"
    if isinstance(event, Sample):
        return f"ADDR:0x{event.instruction_address:08X}"
    labels = {
        "fd": "FD", "path": "PATH", "byte_count": "BYTES", "timeout_us": "TIMEOUT",
        "name": "NAME", "child_pid": "CHILD", "code": "CODE", "target_pid": "TARGET",
        "expiry": "EXPIRY", "pid": "PID",
    }
    return " ".join(f"{labels[f.name]}:{getattr(event, f.name)}" for f in fields(event))
