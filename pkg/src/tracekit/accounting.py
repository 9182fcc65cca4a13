"""Per-process time accounting records shared by the simulator oracle and the analyzers."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional


@dataclass(frozen=True)
class WaitCategory:
    """Where a stretch of non-running time went.

    ``kind`` is one of cpu, file, process, timeout, fork, generic; ``key``
    names the file (display name), the pid, or the syscall/trap.
    """

    kind: str
    key: object = None

    def __str__(self):
        return self.kind if self.key is None else f"{self.kind}:{self.key}"


WAIT_CPU = WaitCategory("cpu")
WAIT_TIMEOUT = WaitCategory("timeout")
WAIT_FORK = WaitCategory("fork")


def wait_file(name: str) -> WaitCategory:
    return WaitCategory("file", name)


def wait_process(pid: int) -> WaitCategory:
    return WaitCategory("process", pid)


def wait_generic(name: str) -> WaitCategory:
    return WaitCategory("generic", name)


_MAP_FIELDS = ("cpu_syscall_us", "cpu_trap_us", "syscall_calls", "trap_calls",
               "syscall_elapsed_us", "trap_elapsed_us", "wait_file_us",
               "wait_process_us", "wait_generic_us", "counters")


@dataclass
class WaitBreakdown:
    """Elapsed time of one process split into CPU and wait components (integer µs).

    Syscall and trap maps are keyed by name; ``wait_process_us`` by pid.
    """

    pid: int
    name: str = ""
    parent_pid: int = 0
    elapsed_us: int = 0
    cpu_user_us: int = 0
    cpu_syscall_us: Counter = field(default_factory=Counter)
    cpu_trap_us: Counter = field(default_factory=Counter)
    syscall_calls: Counter = field(default_factory=Counter)
    trap_calls: Counter = field(default_factory=Counter)
    syscall_elapsed_us: Counter = field(default_factory=Counter)
    trap_elapsed_us: Counter = field(default_factory=Counter)
    wait_cpu_us: int = 0
    wait_file_us: Counter = field(default_factory=Counter)
    wait_process_us: Counter = field(default_factory=Counter)
    wait_timeout_us: int = 0
    wait_fork_us: int = 0
    wait_generic_us: Counter = field(default_factory=Counter)
    counters: Counter = field(default_factory=Counter)

    @property
    def cpu_us(self) -> int:
        return self.cpu_user_us + sum(self.cpu_syscall_us.values()) + sum(self.cpu_trap_us.values())

    @property
    def wait_us(self) -> int:
        return (self.wait_cpu_us + sum(self.wait_file_us.values())
                + sum(self.wait_process_us.values()) + self.wait_timeout_us
                + self.wait_fork_us + sum(self.wait_generic_us.values()))

    def conserved(self) -> bool:
        return self.cpu_us + self.wait_us == self.elapsed_us

    def add_running(self, mode: Optional[tuple], us: int):
        """mode is None for user mode, else ("syscall" | "trap", name)."""
        if not us:
            return
        if mode is None:
            self.cpu_user_us += us
        elif mode[0] == "syscall":
            self.cpu_syscall_us[mode[1]] += us
        else:
            self.cpu_trap_us[mode[1]] += us

    def add_wait(self, cat: WaitCategory, us: int):
        if not us:
            return
        if cat.kind == "cpu":
            self.wait_cpu_us += us
        elif cat.kind == "file":
            self.wait_file_us[cat.key] += us
        elif cat.kind == "process":
            self.wait_process_us[cat.key] += us
        elif cat.kind == "timeout":
            self.wait_timeout_us += us
        elif cat.kind == "fork":
            self.wait_fork_us += us
        elif cat.kind == "generic":
            self.wait_generic_us[cat.key] += us
        else:
            raise ValueError(f"unknown wait category {cat}")

    def normalized(self) -> "WaitBreakdown":
        """Copy with zero entries dropped from every map, for comparisons."""
        out = WaitBreakdown(**{k: getattr(self, k) for k in self.__dataclass_fields__
                               if k not in _MAP_FIELDS})
        for k in _MAP_FIELDS:
            setattr(out, k, Counter({key: v for key, v in getattr(self, k).items() if v}))
        return out

    def to_json(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, Counter):
                v = {str(key): n for key, n in sorted(v.items(), key=lambda kv: str(kv[0])) if n}
            out[k] = v
        return out

    @classmethod
    def from_json(cls, data: dict) -> "WaitBreakdown":
        kwargs = dict(data)
        for k in _MAP_FIELDS:
            raw = kwargs.get(k, {})
            if k == "wait_process_us":
                kwargs[k] = Counter({int(key): v for key, v in raw.items()})
            else:
                kwargs[k] = Counter(raw)
        return cls(**kwargs)


@dataclass
class ServerProfile:
    """A server's CPU time split into its initialization phase and per-client shares."""

    server_pid: int
    name: str = ""
    init_cpu_us: int = 0
    per_client_cpu_us: Counter = field(default_factory=Counter)
    current_client: Optional[int] = None

    @property
    def total_cpu_us(self) -> int:
        return self.init_cpu_us + sum(self.per_client_cpu_us.values())

    def add(self, client: Optional[int], us: int):
        if not us:
            return
        if client is None:
            self.init_cpu_us += us
        else:
            self.per_client_cpu_us[client] += us

    def to_json(self) -> dict:
        return {
            "server_pid": self.server_pid,
            "name": self.name,
            "init_cpu_us": self.init_cpu_us,
            "per_client_cpu_us": {str(k): v for k, v in sorted(self.per_client_cpu_us.items()) if v},
        }
