"""Line-oriented scenario language driving the workload simulator.

A scenario has an optional ``resources`` section and one section per
process::

    resources
      cpus 1
      quantum 10000
      file_latency default 4000
      file_latency /usr/bin/galeon-bin 20000

    process main delay 500
      open /data/log as f1
      read f1 65536
      compute 10000 fn parse
      fork as k {
        statlike 200
      }
      waitchild k
      exit

Blocks (``fork`` and ``repeat N``) open with ``{`` at the end of the line and
close with a line holding only ``}``.  Names bound with ``as`` are resolved
when the file is parsed, so a bad reference is reported with its line.
"""

from __future__ import annotations

import posixpath
from dataclasses import dataclass, field
from importlib import resources as _res
from typing import Optional


class ScenarioError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class ResourceModel:
    cpu_count: int = 1
    quantum_us: int = 10_000
    default_file_latency_us: int = 4_000
    file_latency_us: dict = field(default_factory=dict)
    connect_latency_us: int = 200
    syscall_cost_us: int = 20
    anon_fault_latency_us: int = 50
    latency_jitter_us: int = 0

    def __post_init__(self):
        if self.cpu_count < 1:
            raise ScenarioError("cpu_count must be >= 1")
        positive = [self.quantum_us, self.default_file_latency_us, self.connect_latency_us,
                    self.anon_fault_latency_us, *self.file_latency_us.values()]
        if any(v <= 0 for v in positive):
            raise ScenarioError("latencies and quantum must be positive")
        if self.syscall_cost_us < 0 or self.latency_jitter_us < 0:
            raise ScenarioError("syscall cost and jitter must be non-negative")

    def file_latency(self, path: str) -> int:
        return self.file_latency_us.get(path, self.default_file_latency_us)


# -- actions ----------------------------------------------------------------

@dataclass(frozen=True)
class Action:
    line: int = field(default=0, compare=False, kw_only=True)


@dataclass(frozen=True)
class Compute(Action):
    duration_us: int
    fn: Optional[str] = None
    caller: Optional[str] = None


@dataclass(frozen=True)
class Open(Action):
    path: str
    bind: str


@dataclass(frozen=True)
class Close(Action):
    ref: str


@dataclass(frozen=True)
class Read(Action):
    ref: str
    nbytes: int


@dataclass(frozen=True)
class Write(Action):
    ref: str
    nbytes: int


@dataclass(frozen=True)
class Mmap(Action):
    path: Optional[str]  # None maps anonymous memory
    length: int
    bind: str


@dataclass(frozen=True)
class TouchPage(Action):
    ref: str
    offset: int


@dataclass(frozen=True)
class Poll(Action):
    refs: tuple
    timeout_us: int = 0


@dataclass(frozen=True)
class Sleep(Action):
    duration_us: int


@dataclass(frozen=True)
class Fork(Action):
    actions: tuple
    bind: Optional[str] = None


@dataclass(frozen=True)
class WaitChild(Action):
    ref: Optional[str] = None  # None waits for any child


@dataclass(frozen=True)
class StatLike(Action):
    duration_us: int


@dataclass(frozen=True)
class Listen(Action):
    bind: str


@dataclass(frozen=True)
class Connect(Action):
    server: str
    bind: str


@dataclass(frozen=True)
class Accept(Action):
    ref: str
    bind: str


@dataclass(frozen=True)
class ReadConn(Action):
    ref: str
    nbytes: int


@dataclass(frozen=True)
class ServeCompute(Action):
    duration_us: int
    for_ref: Optional[str] = None
    fn: Optional[str] = None


@dataclass(frozen=True)
class Exec(Action):
    name: str


@dataclass(frozen=True)
class Exit(Action):
    code: int = 0


@dataclass(frozen=True)
class ProcessSpec:
    name: str
    start_delay_us: int
    actions: tuple


@dataclass(frozen=True)
class Scenario:
    resources: ResourceModel
    processes: tuple

    def __post_init__(self):
        if not self.processes:
            raise ScenarioError("scenario has no process")


# -- parsing ----------------------------------------------------------------

def _num(tok: str, line: int, what: str = "number") -> int:
    try:
        value = int(tok, 10)
    except ValueError:
        raise ScenarioError(f"malformed {what} {tok!r}", line) from None
    if value < 0:
        raise ScenarioError(f"negative {what} {tok!r}", line)
    return value


def _bind(toks, i, line):
    if len(toks) != i + 2 or toks[i] != "as":
        raise ScenarioError(f"expected 'as <name>' in {' '.join(toks)!r}", line)
    return toks[i + 1]


def _options(toks, start, line, allowed):
    opts = {}
    i = start
    while i < len(toks):
        key = toks[i]
        if key not in allowed or i + 1 >= len(toks):
            raise ScenarioError(f"unexpected {key!r}", line)
        opts[key] = toks[i + 1]
        i += 2
    return opts


def _parse_action(toks, line):
    kw, args = toks[0], toks[1:]

    def need(n):
        if len(args) != n:
            raise ScenarioError(f"{kw} takes {n} argument(s)", line)

    if kw == "compute":
        if not args:
            raise ScenarioError("compute needs a duration", line)
        opts = _options(toks, 2, line, {"fn", "from"})
        return Compute(_num(args[0], line), opts.get("fn"), opts.get("from"), line=line)
    if kw == "servecompute":
        if not args:
            raise ScenarioError("servecompute needs a duration", line)
        opts = _options(toks, 2, line, {"for", "fn"})
        return ServeCompute(_num(args[0], line), opts.get("for"), opts.get("fn"), line=line)
    if kw == "open":
        if len(args) != 3:
            raise ScenarioError("usage: open <path> as <name>", line)
        return Open(args[0], _bind(toks, 2, line), line=line)
    if kw == "close":
        need(1)
        return Close(args[0], line=line)
    if kw in ("read", "write", "readconn"):
        need(2)
        cls = {"read": Read, "write": Write, "readconn": ReadConn}[kw]
        return cls(args[0], _num(args[1], line), line=line)
    if kw == "mmap":
        if len(args) != 4:
            raise ScenarioError("usage: mmap <path|anon> <length> as <name>", line)
        length = _num(args[1], line)
        if length == 0:
            raise ScenarioError("mmap length must be positive", line)
        return Mmap(None if args[0] == "anon" else args[0], length, _bind(toks, 3, line), line=line)
    if kw == "touch":
        need(2)
        return TouchPage(args[0], _num(args[1], line), line=line)
    if kw == "poll":
        refs, timeout = list(args), 0
        if "timeout" in refs:
            k = refs.index("timeout")
            if k != len(refs) - 2:
                raise ScenarioError("timeout must be the last option", line)
            timeout = _num(refs[k + 1], line)
            refs = refs[:k]
        if not refs and timeout == 0:
            raise ScenarioError("poll with no descriptor needs a timeout", line)
        return Poll(tuple(refs), timeout, line=line)
    if kw in ("sleep", "statlike"):
        need(1)
        d = _num(args[0], line)
        if d == 0:
            raise ScenarioError(f"{kw} duration must be positive", line)
        return (Sleep if kw == "sleep" else StatLike)(d, line=line)
    if kw == "waitchild":
        if len(args) > 1:
            raise ScenarioError("usage: waitchild [name]", line)
        return WaitChild(args[0] if args else None, line=line)
    if kw == "listen":
        return Listen(_bind(toks, 1, line), line=line)
    if kw == "connect":
        if len(args) != 3:
            raise ScenarioError("usage: connect <server> as <name>", line)
        return Connect(args[0], _bind(toks, 2, line), line=line)
    if kw == "accept":
        if len(args) != 3:
            raise ScenarioError("usage: accept <listener> as <name>", line)
        return Accept(args[0], _bind(toks, 2, line), line=line)
    if kw == "exec":
        need(1)
        return Exec(args[0], line=line)
    if kw == "exit":
        if len(args) > 1 or (args and not args[0].lstrip("-").isdigit()):
            raise ScenarioError("usage: exit [code]", line)
        return Exit(int(args[0]) if args else 0, line=line)
    raise ScenarioError(f"unknown action {kw!r}", line)


_RESOURCE_KEYS = {
    "cpus": "cpu_count",
    "quantum": "quantum_us",
    "connect_latency": "connect_latency_us",
    "syscall_cost": "syscall_cost_us",
    "anon_fault_latency": "anon_fault_latency_us",
    "latency_jitter": "latency_jitter_us",
}
_MAY_BE_ZERO = ("syscall_cost", "latency_jitter")


class _Frame:
    def __init__(self, kind, line, bind=None, count=1):
        self.kind, self.line, self.bind, self.count = kind, line, bind, count
        self.actions = []


def parse_scenario(text: str) -> Scenario:
    res = {}
    file_latency = {}
    procs = []
    section = None
    stack = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        body = raw.split("#", 1)[0].strip()
        if not body:
            continue
        toks = body.split()
        kw = toks[0]
        if kw in ("process", "resources") and not raw[:1].isspace():
            if stack and len(stack) > 1:
                raise ScenarioError(f"unclosed block opened on line {stack[-1].line}", lineno)
            if kw == "resources":
                if len(toks) != 1:
                    raise ScenarioError("'resources' takes no arguments", lineno)
                section, stack = "resources", []
                continue
            if len(toks) not in (2, 4) or (len(toks) == 4 and toks[2] != "delay"):
                raise ScenarioError("usage: process <name> [delay <us>]", lineno)
            delay = _num(toks[3], lineno) if len(toks) == 4 else 0
            frame = _Frame("process", lineno, bind=toks[1], count=delay)
            procs.append(frame)
            section, stack = "process", [frame]
            continue
        if section is None:
            raise ScenarioError("action outside of a process section", lineno)
        if section == "resources":
            if kw == "file_latency":
                if len(toks) != 3:
                    raise ScenarioError("usage: file_latency <path|default> <us>", lineno)
                value = _num(toks[2], lineno)
                if value < 1:
                    raise ScenarioError("file latency must be positive", lineno)
                if toks[1] == "default":
                    res["default_file_latency_us"] = value
                else:
                    file_latency[toks[1]] = value
            elif kw in _RESOURCE_KEYS and len(toks) == 2:
                value = _num(toks[1], lineno)
                if value < 1 and kw not in _MAY_BE_ZERO:
                    raise ScenarioError(f"{kw} must be positive", lineno)
                res[_RESOURCE_KEYS[kw]] = value
            else:
                raise ScenarioError(f"unknown resource setting {body!r}", lineno)
            continue
        if body == "}":
            if len(stack) < 2:
                raise ScenarioError("unmatched '}'", lineno)
            done = stack.pop()
            if done.kind == "fork":
                stack[-1].actions.append(Fork(tuple(done.actions), done.bind, line=done.line))
            else:
                stack[-1].actions.append(("repeat", done.count, done.actions))
            continue
        if toks[-1] == "{":
            head = toks[:-1]
            if head[0] == "fork":
                bind = _bind(head, 1, lineno) if len(head) > 1 else None
                stack.append(_Frame("fork", lineno, bind=bind))
            elif head[0] == "repeat" and len(head) == 2:
                stack.append(_Frame("repeat", lineno, count=_num(head[1], lineno)))
            else:
                raise ScenarioError(f"cannot open a block with {body!r}", lineno)
            continue
        stack[-1].actions.append(_parse_action(toks, lineno))
    if len(stack) > 1:
        raise ScenarioError(f"unclosed block opened on line {stack[-1].line}", stack[-1].line)
    try:
        resources = ResourceModel(file_latency_us=file_latency, **res)
    except ScenarioError:
        raise
    names = [f.bind for f in procs]
    if len(set(names)) != len(names):
        raise ScenarioError("duplicate process name")
    specs = []
    for frame in procs:
        actions = _expand(frame.actions)
        _check_refs(actions, {}, set(names))
        specs.append(ProcessSpec(frame.bind, frame.count, tuple(actions)))
    if not specs:
        raise ScenarioError("scenario has no process")
    return Scenario(resources, tuple(specs))


def _expand(items):
    out = []
    for item in items:
        if isinstance(item, tuple):
            _, count, body = item
            body = _expand(body)
            for _ in range(count):
                out.extend(body)
        elif isinstance(item, Fork):
            out.append(Fork(tuple(_expand(item.actions)), item.bind, line=item.line))
        else:
            out.append(item)
    return out


def _check_refs(actions, scope, servers):
    """Validate references in execution order; ``scope`` maps name -> kind."""

    def use(name, kinds, line):
        kind = scope.get(name)
        if kind is None:
            raise ScenarioError(f"unresolved reference {name!r}", line)
        if kind not in kinds:
            raise ScenarioError(f"{name!r} is a {kind}, expected {' or '.join(kinds)}", line)
        return kind

    for a in actions:
        if isinstance(a, Open):
            scope[a.bind] = "file"
        elif isinstance(a, Close):
            use(a.ref, ("file", "conn", "listener"), a.line)
            del scope[a.ref]
        elif isinstance(a, Read):
            use(a.ref, ("file",), a.line)
        elif isinstance(a, Write):
            use(a.ref, ("file", "conn"), a.line)
        elif isinstance(a, ReadConn):
            use(a.ref, ("conn",), a.line)
        elif isinstance(a, Mmap):
            scope[a.bind] = "mapping"
            scope[(a.bind, "length")] = a.length
        elif isinstance(a, TouchPage):
            use(a.ref, ("mapping",), a.line)
            if a.offset >= scope[(a.ref, "length")]:
                raise ScenarioError(f"offset {a.offset} outside mapping {a.ref!r}", a.line)
        elif isinstance(a, Poll):
            for r in a.refs:
                use(r, ("file", "conn", "listener"), a.line)
        elif isinstance(a, Fork):
            child_scope = {k: v for k, v in scope.items() if v == "file"}
            _check_refs(a.actions, child_scope, servers)
            if a.bind:
                scope[a.bind] = "child"
        elif isinstance(a, WaitChild):
            if a.ref is not None:
                use(a.ref, ("child",), a.line)
        elif isinstance(a, Listen):
            scope[a.bind] = "listener"
        elif isinstance(a, Connect):
            if a.server not in servers:
                raise ScenarioError(f"no process named {a.server!r}", a.line)
            scope[a.bind] = "conn"
        elif isinstance(a, Accept):
            use(a.ref, ("listener",), a.line)
            scope[a.bind] = "conn"
        elif isinstance(a, ServeCompute):
            if a.for_ref is not None:
                use(a.for_ref, ("conn",), a.line)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


BUNDLED = ("galeon", "read_file", "page_fault", "waitpid", "poll_file",
           "wait_any", "poll_timeout", "generic", "clients", "batching", "phases")


def bundled_scenario_text(name: str) -> str:
    return _res.files("tracekit").joinpath("scenarios").joinpath(f"{name}.scn").read_text("utf-8")


def bundled_scenario(name: str) -> Scenario:
    """One of the scenario files shipped with the package (see ``BUNDLED``)."""
    return parse_scenario(bundled_scenario_text(name))


def basename(path: str) -> str:
    return posixpath.basename(path) or path
