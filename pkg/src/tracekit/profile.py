"""Sample histograms, call arcs and coverage counts reduced to text reports.

The flat profile turns bucket counts into seconds per function.  The call
graph collapses strongly connected components into cycle entries, then
walks the condensation from the leaves up, handing each node's total time
to its callers in proportion to how often each one called it.
"""

from __future__ import annotations

import bisect
import json
from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

UNKNOWN = "<unknown>"


class ProfileError(ValueError):
    pass


# -- symbols ----------------------------------------------------------------

@dataclass(frozen=True)
class Symbol:
    start: int
    end: int  # exclusive
    name: str


class SymbolTable:
    def __init__(self, entries, line_map: Optional[dict] = None):
        self.entries = sorted(entries, key=lambda s: s.start)
        for a, b in zip(self.entries, self.entries[1:]):
            if b.start < a.end:
                raise ProfileError(f"symbols {a.name} and {b.name} overlap")
        for s in self.entries:
            if s.end <= s.start:
                raise ProfileError(f"symbol {s.name} has an empty range")
        self._starts = [s.start for s in self.entries]
        self._by_name = {s.name: s for s in self.entries}
        self.line_map = dict(line_map or {})

    @classmethod
    def from_names(cls, names, base: int, size: int) -> "SymbolTable":
        return cls([Symbol(base + i * size, base + (i + 1) * size, n) for i, n in enumerate(names)])

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def lookup(self, address: int) -> Optional[str]:
        i = bisect.bisect_right(self._starts, address) - 1
        if i >= 0 and address < self.entries[i].end:
            return self.entries[i].name
        return None

    def address_of(self, name: str) -> int:
        return self._by_name[name].start

    def to_json(self) -> list:
        return [{"name": s.name, "start": s.start, "end": s.end} for s in self.entries]

    @classmethod
    def from_json(cls, data) -> "SymbolTable":
        return cls([Symbol(int(d["start"]), int(d["end"]), d["name"]) for d in data])


# -- histogram --------------------------------------------------------------

class SampleHistogram:
    """One counter per ``bucket_width_bytes`` of address space from ``base_address``."""

    def __init__(self, base_address: int, bucket_width_bytes: int, n_buckets: int,
                 period_s: float = 0.01, counts=None):
        if bucket_width_bytes < 1:
            raise ProfileError("bucket width must be at least 1 byte")
        self.base_address = base_address
        self.bucket_width_bytes = bucket_width_bytes
        self.period_s = period_s
        if counts is None:
            self.counts = np.zeros(n_buckets, dtype=np.int64)
        else:
            self.counts = np.asarray(counts, dtype=np.int64).copy()
            if len(self.counts) != n_buckets:
                raise ProfileError("count array does not match the bucket count")
            if (self.counts < 0).any():
                raise ProfileError("negative bucket count")

    @classmethod
    def for_symbols(cls, symbols: SymbolTable, width: int = 4,
                    period_s: float = 0.01) -> "SampleHistogram":
        if not len(symbols):
            return cls(0, width, 0, period_s)
        base = symbols.entries[0].start
        top = symbols.entries[-1].end
        return cls(base, width, -(-(top - base) // width), period_s)

    @property
    def total_samples(self) -> int:
        return int(self.counts.sum())

    def bucket_of(self, address: int) -> int:
        if address < self.base_address:
            raise ProfileError(f"address 0x{address:x} below histogram base 0x{self.base_address:x}")
        i = (address - self.base_address) // self.bucket_width_bytes
        if i >= len(self.counts):
            raise ProfileError(f"address 0x{address:x} beyond histogram extent")
        return i

    def record(self, address: int, n: int = 1):
        self.counts[self.bucket_of(address)] += n

    def bucket_address(self, i: int) -> int:
        return self.base_address + i * self.bucket_width_bytes

    def merge(self, other: "SampleHistogram") -> "SampleHistogram":
        if (other.base_address, other.bucket_width_bytes, len(other.counts)) != \
                (self.base_address, self.bucket_width_bytes, len(self.counts)):
            raise ProfileError("histograms cover different address ranges")
        return SampleHistogram(self.base_address, self.bucket_width_bytes, len(self.counts),
                               self.period_s, self.counts + other.counts)

    def to_json(self) -> dict:
        return {"base": self.base_address, "width": self.bucket_width_bytes,
                "period_s": self.period_s, "counts": self.counts.tolist()}

    @classmethod
    def from_json(cls, data) -> "SampleHistogram":
        counts = data["counts"]
        return cls(int(data["base"]), int(data["width"]), len(counts),
                   float(data["period_s"]), counts)


def record_sample(hist: SampleHistogram, address: int) -> SampleHistogram:
    hist.record(address)
    return hist


# -- arcs -------------------------------------------------------------------

class ArcTable(Counter):
    """(caller, callee) -> call count."""

    def record(self, caller: str, callee: str, n: int = 1):
        if n <= 0:
            raise ProfileError("arc counts must be positive")
        self[(caller, callee)] += n

    def to_json(self) -> list:
        return [[a, b, n] for (a, b), n in sorted(self.items())]

    @classmethod
    def from_json(cls, data) -> "ArcTable":
        out = cls()
        for caller, callee, n in data:
            out.record(caller, callee, int(n))
        return out


def record_arc(arcs: ArcTable, caller: str, callee: str) -> ArcTable:
    arcs.record(caller, callee)
    return arcs


# -- flat profile -----------------------------------------------------------

@dataclass
class FlatRow:
    name: str
    samples: int
    self_s: float
    percent: float
    cumulative_s: float
    calls: Optional[int] = None
    self_ms_per_call: Optional[float] = None
    total_ms_per_call: Optional[float] = None
    overhead: bool = False


@dataclass
class FlatProfile:
    rows: list
    period_s: float
    total_samples: int
    overhead_function: Optional[str] = None

    @property
    def total_s(self) -> float:
        return self.total_samples * self.period_s

    @property
    def overhead_s(self) -> float:
        return sum(r.self_s for r in self.rows if r.overhead)

    @property
    def compensated_total_s(self) -> float:
        return (self.total_samples - sum(r.samples for r in self.rows if r.overhead)) * self.period_s

    def row(self, name: str) -> Optional[FlatRow]:
        for r in self.rows:
            if r.name == name:
                return r
        return None

    def self_seconds(self) -> dict:
        return {r.name: r.self_s for r in self.rows}

    def render(self) -> str:
        if not self.rows:
            return ""
        out = [f"Each sample counts as {self.period_s:g} seconds.",
               "  %   cumulative   self              self     total",
               " time   seconds   seconds    calls  ms/call  ms/call  name"]
        for r in self.rows:
            calls = "" if r.calls is None else str(r.calls)
            spc = "" if r.self_ms_per_call is None else f"{r.self_ms_per_call:.2f}"
            tpc = "" if r.total_ms_per_call is None else f"{r.total_ms_per_call:.2f}"
            out.append(f"{r.percent:6.2f} {r.cumulative_s:9.2f} {r.self_s:8.2f} "
                       f"{calls:>8} {spc:>8} {tpc:>8}  {r.name}")
        out.append("")
        out.append(f"total sampled time {self.total_s:.2f} s")
        if self.overhead_function is not None:
            out.append(f"profiler overhead ({self.overhead_function}) {self.overhead_s:.2f} s")
            out.append(f"compensated total {self.compensated_total_s:.2f} s")
        return "\n".join(out) + "\n"

    def to_json(self) -> dict:
        return {
            "period_s": self.period_s,
            "total_samples": self.total_samples,
            "total_s": self.total_s,
            "overhead_function": self.overhead_function,
            "compensated_total_s": self.compensated_total_s,
            "rows": [r.__dict__ for r in self.rows],
        }


def function_samples(hist: SampleHistogram, symbols: SymbolTable) -> Counter:
    """Samples per function; a bucket belongs to the symbol holding its start address."""
    out = Counter()
    for i in np.flatnonzero(hist.counts):
        name = symbols.lookup(hist.bucket_address(int(i))) or UNKNOWN
        out[name] += int(hist.counts[i])
    return out


def flat_profile(hist: SampleHistogram, symbols: SymbolTable,
                 overhead_function: Optional[str] = None,
                 arcs: Optional[ArcTable] = None) -> FlatProfile:
    samples = function_samples(hist, symbols)
    return flat_from_samples(samples, hist.period_s, overhead_function, arcs)


def flat_from_samples(samples, period_s: float, overhead_function: Optional[str] = None,
                      arcs: Optional[ArcTable] = None) -> FlatProfile:
    total = sum(samples.values())
    ordered = sorted(((n, name) for name, n in samples.items() if n > 0),
                     key=lambda x: (-x[0], x[1]))
    rows, running = [], 0
    for n, name in ordered:
        running += n
        rows.append(FlatRow(name, n, n * period_s, 100.0 * n / total, running * period_s,
                            overhead=(name == overhead_function)))
    flat = FlatProfile(rows, period_s, total, overhead_function)
    if arcs:
        graph = call_graph(flat, arcs)
        for r in rows:
            entry = graph.functions.get(r.name)
            if entry is None or not entry.calls:
                continue
            r.calls = entry.calls
            r.self_ms_per_call = 1000.0 * entry.self_s / entry.calls
            r.total_ms_per_call = 1000.0 * entry.total_s / entry.calls
    return flat


# -- call graph -------------------------------------------------------------

@dataclass
class ArcLine:
    name: str
    calls: int
    total_calls: int
    self_s: float
    children_s: float


@dataclass
class GraphEntry:
    name: str
    self_s: float
    children_s: float
    calls: int  # calls from other functions (self-recursion excluded)
    self_calls: int = 0
    percent: float = 0.0
    callers: list = field(default_factory=list)
    callees: list = field(default_factory=list)
    cycle: Optional[int] = None
    index: int = 0

    @property
    def total_s(self) -> float:
        return self.self_s + self.children_s


@dataclass
class CycleEntry:
    number: int
    members: tuple
    self_s: float
    children_s: float
    calls: int  # calls entering the cycle from outside
    internal_calls: int
    percent: float = 0.0
    callers: list = field(default_factory=list)
    callees: list = field(default_factory=list)
    index: int = 0

    @property
    def name(self) -> str:
        return f"<cycle {self.number} as a whole>"

    @property
    def total_s(self) -> float:
        return self.self_s + self.children_s


@dataclass
class CallGraphReport:
    functions: dict
    cycles: list
    total_s: float
    warnings: list

    def root_total(self) -> float:
        """Sum of totals over nodes nobody else calls (cycles counted once)."""
        total = 0.0
        for c in self.cycles:
            if c.calls == 0:
                total += c.total_s
        for f in self.functions.values():
            if f.cycle is None and f.calls == 0:
                total += f.total_s
        return total

    def entries(self) -> list:
        items = list(self.functions.values()) + list(self.cycles)
        return sorted(items, key=lambda e: e.index)

    def render(self) -> str:
        if not self.functions:
            return ""
        idx = {e.name: e.index for e in self.entries()}
        cyc = {m: c.number for c in self.cycles for m in c.members}

        def label(name):
            tag = f" <cycle {cyc[name]}>" if name in cyc else ""
            return f"{name}{tag} [{idx[name]}]" if name in idx else name

        out = ["index  % time    self  children    called     name"]
        for e in self.entries():
            for a in e.callers:
                out.append(f"{'':16}{a.self_s:6.2f}  {a.children_s:8.2f} "
                           f"{f'{a.calls}/{a.total_calls}':>13}      {label(a.name)}")
            called = str(e.calls) if e.calls else ""
            if isinstance(e, GraphEntry) and e.self_calls:
                called += f"+{e.self_calls}"
            if isinstance(e, CycleEntry) and e.internal_calls:
                called += f"+{e.internal_calls}"
            head = f"[{e.index}]"
            out.append(f"{head:<6} {e.percent:6.1f} {e.self_s:7.2f}  {e.children_s:8.2f} "
                       f"{called:>10}         {label(e.name)}")
            for a in e.callees:
                out.append(f"{'':16}{a.self_s:6.2f}  {a.children_s:8.2f} "
                           f"{f'{a.calls}/{a.total_calls}':>13}      {label(a.name)}")
            out.append("-" * 47)
        for w in self.warnings:
            out.append(f"warning: {w}")
        return "\n".join(out) + "\n"

    def to_json(self) -> dict:
        def arc(a):
            return a.__dict__

        return {
            "total_s": self.total_s,
            "functions": [
                {"name": f.name, "index": f.index, "self_s": f.self_s,
                 "children_s": f.children_s, "calls": f.calls, "self_calls": f.self_calls,
                 "percent": f.percent, "cycle": f.cycle,
                 "callers": [arc(a) for a in f.callers], "callees": [arc(a) for a in f.callees]}
                for f in sorted(self.functions.values(), key=lambda e: e.index)],
            "cycles": [
                {"number": c.number, "index": c.index, "members": list(c.members),
                 "self_s": c.self_s, "children_s": c.children_s, "calls": c.calls,
                 "internal_calls": c.internal_calls, "percent": c.percent,
                 "callers": [arc(a) for a in c.callers], "callees": [arc(a) for a in c.callees]}
                for c in self.cycles],
            "warnings": list(self.warnings),
        }


def strongly_connected(nodes, succ) -> list:
    """Tarjan's algorithm, iterative.  Components come out callees-first."""
    index, low, on_stack = {}, {}, set()
    stack, comps, counter = [], [], 0
    for root in nodes:
        if root in index:
            continue
        work = [(root, iter(succ.get(root, ())))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(succ.get(w, ()))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                u = work[-1][0]
                low[u] = min(low[u], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                comps.append(tuple(sorted(comp)))
    return comps


def call_graph(flat, arcs: ArcTable) -> CallGraphReport:
    """Propagate self time up the arc graph.  ``flat`` is a FlatProfile or a name -> seconds map."""
    self_s = dict(flat.self_seconds()) if isinstance(flat, FlatProfile) else dict(flat)
    total_s = sum(self_s.values())
    warnings = []
    names = set(self_s)
    for (a, b), n in arcs.items():
        if n <= 0:
            raise ProfileError("arc counts must be positive")
        for x in (a, b):
            if x not in names:
                names.add(x)
                self_s[x] = 0.0
                warnings.append(f"{x} appears in arcs but has no samples")
    nodes = sorted(names)
    succ = {v: [] for v in nodes}
    calls_in = Counter()
    self_calls = Counter()
    for (a, b), n in sorted(arcs.items()):
        if a == b:
            self_calls[a] += n
            continue
        succ[a].append(b)
        calls_in[b] += n

    comps = strongly_connected(nodes, succ)
    comp_of = {v: i for i, c in enumerate(comps) for v in c}
    comp_self = [sum(self_s[v] for v in c) for c in comps]
    comp_children = [0.0] * len(comps)
    ext_in = Counter()
    for (a, b), n in arcs.items():
        if a != b and comp_of[a] != comp_of[b]:
            ext_in[comp_of[b]] += n
    member_children = Counter()

    def share(a, b, n):
        """(self, children) of b's unit credited to the call a -> b."""
        cb = comp_of[b]
        if len(comps[cb]) > 1:
            s, ch, denom = comp_self[cb], comp_children[cb], ext_in[cb]
        else:
            s, ch, denom = self_s[b], comp_children[cb], calls_in[b]
        return s * n / denom, ch * n / denom

    # Tarjan emits components callees-first, so every callee unit is final
    # by the time its callers are visited.
    for i, comp in enumerate(comps):
        for a in comp:
            for b in succ[a]:
                if comp_of[b] == i:
                    continue
                s, ch = share(a, b, arcs[(a, b)])
                comp_children[i] += s + ch
                member_children[a] += s + ch

    cycles = []
    cycle_no = {}
    for i, comp in enumerate(comps):
        if len(comp) > 1:
            number = len(cycles) + 1
            cycle_no[i] = number
            internal = sum(n for (a, b), n in arcs.items()
                           if a != b and comp_of[a] == i and comp_of[b] == i)
            cycles.append(CycleEntry(number, comp, comp_self[i], comp_children[i],
                                     ext_in[i], internal))

    functions = {}
    for v in nodes:
        ci = comp_of[v]
        in_cycle = ci in cycle_no
        children = member_children[v] if in_cycle else comp_children[ci]
        functions[v] = GraphEntry(v, self_s[v], children, calls_in[v], self_calls[v],
                                  cycle=cycle_no.get(ci))

    def arc_line(a, b, n, credited_to_caller):
        """Line describing the call a -> b; shows b's time credited to a."""
        if comp_of[a] == comp_of[b]:
            return ArcLine(a if not credited_to_caller else b, n, calls_in[b], 0.0, 0.0)
        s, ch = share(a, b, n)
        denom = ext_in[comp_of[b]] if comp_of[b] in cycle_no else calls_in[b]
        return ArcLine(a if not credited_to_caller else b, n, denom, s, ch)

    for (a, b), n in sorted(arcs.items()):
        if a == b:
            continue
        fa, fb = functions[a], functions[b]
        fb.callers.append(_caller_line(fb, a, n, calls_in[b]))
        fa.callees.append(arc_line(a, b, n, True))
    for c in cycles:
        i = comp_of[c.members[0]]
        for (a, b), n in sorted(arcs.items()):
            if a == b:
                continue
            if comp_of[b] == i and comp_of[a] != i:
                s, ch = share(a, b, n)
                c.callers.append(ArcLine(a, n, ext_in[i], s, ch))
            elif comp_of[a] == i and comp_of[b] != i:
                c.callees.append(arc_line(a, b, n, True))

    for f in functions.values():
        f.percent = 100.0 * f.total_s / total_s if total_s else 0.0
    for c in cycles:
        c.percent = 100.0 * c.total_s / total_s if total_s else 0.0
    ordered = sorted(list(functions.values()) + cycles,
                     key=lambda e: (-e.total_s, isinstance(e, GraphEntry), e.name))
    for k, e in enumerate(ordered, 1):
        e.index = k
    return CallGraphReport(functions, cycles, total_s, warnings)


def _caller_line(entry: GraphEntry, caller: str, n: int, calls_in: int) -> ArcLine:
    """The callee's own self and children split by this caller's share of its calls."""
    return ArcLine(caller, n, calls_in, entry.self_s * n / calls_in,
                   entry.children_s * n / calls_in)


# -- profile data files -----------------------------------------------------

@dataclass
class ProfileData:
    histogram: SampleHistogram
    symbols: SymbolTable
    arcs: ArcTable
    overhead_function: Optional[str] = None

    def to_json(self) -> dict:
        out = {"histogram": self.histogram.to_json(), "symbols": self.symbols.to_json(),
               "arcs": self.arcs.to_json()}
        if self.overhead_function:
            out["overhead_function"] = self.overhead_function
        return out

    @classmethod
    def from_json(cls, data) -> "ProfileData":
        try:
            return cls(SampleHistogram.from_json(data["histogram"]),
                       SymbolTable.from_json(data["symbols"]),
                       ArcTable.from_json(data.get("arcs", [])),
                       data.get("overhead_function"))
        except (KeyError, TypeError) as exc:
            raise ProfileError(f"malformed profile data: missing {exc}") from None

    def flat(self) -> FlatProfile:
        return flat_profile(self.histogram, self.symbols, self.overhead_function, self.arcs)

    def graph(self) -> CallGraphReport:
        return call_graph(self.flat(), self.arcs)


def load_profile(path) -> ProfileData:
    with open(path, encoding="utf-8") as fh:
        return ProfileData.from_json(json.load(fh))


# -- coverage ---------------------------------------------------------------

@dataclass
class LineCount:
    line_no: int
    count: int = 0
    instrumented: bool = True
    text: str = ""


@dataclass
class BranchCount:
    line_no: int
    executed: int
    taken: int

    def __post_init__(self):
        if not 0 <= self.taken <= self.executed:
            raise ProfileError(f"line {self.line_no}: taken count exceeds executed count")


@dataclass
class FunctionCoverage:
    name: str
    lines: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    calls: int = 0

    def line_stats(self):
        instr = [ln for ln in self.lines if ln.instrumented]
        return sum(1 for ln in instr if ln.count > 0), len(instr)

    def branch_stats(self):
        n = len(self.branches)
        return (sum(1 for b in self.branches if b.executed > 0),
                sum(1 for b in self.branches if b.taken > 0), n)


@dataclass
class CoverageCounts:
    functions: list

    @classmethod
    def from_json(cls, data) -> "CoverageCounts":
        try:
            funcs = []
            for f in data["functions"]:
                lines = [LineCount(int(d["line"]), int(d.get("count", 0)),
                                   bool(d.get("instrumented", True)), d.get("text", ""))
                         for d in f.get("lines", [])]
                branches = [BranchCount(int(d["line"]), int(d["executed"]), int(d["taken"]))
                            for d in f.get("branches", [])]
                funcs.append(FunctionCoverage(f["name"], lines, branches, int(f.get("calls", 0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProfileError(f"malformed coverage data: {exc}") from None
        return cls(funcs)

    def to_json(self) -> dict:
        return {"functions": [
            {"name": f.name, "calls": f.calls,
             "lines": [{"line": ln.line_no, "count": ln.count,
                        "instrumented": ln.instrumented, "text": ln.text} for ln in f.lines],
             "branches": [{"line": b.line_no, "executed": b.executed, "taken": b.taken}
                          for b in f.branches]}
            for f in self.functions]}


def percent(part: int, whole: int) -> str:
    return f"{100.0 * part / whole:.2f}%" if whole else "0.00%"


def branch_percent(taken: int, executed: int) -> int:
    """Integer percent rounded half up."""
    return (200 * taken + executed) // (2 * executed)


def coverage_report(counts: CoverageCounts) -> str:
    out = []
    for f in counts.functions:
        hit, n = f.line_stats()
        if n:
            out.append(f"{percent(hit, n)} of {n} source lines executed in function {f.name}")
        else:
            out.append(f"No executable lines in function {f.name}")
        executed, taken, nb = f.branch_stats()
        if nb:
            out.append(f"{percent(executed, nb)} of {nb} branches executed in function {f.name}")
            out.append(f"{percent(taken, nb)} of {nb} branches taken at least once "
                       f"in function {f.name}")
        else:
            out.append(f"No branches in function {f.name}")
        if not f.calls:
            out.append(f"No calls in function {f.name}")
    for f in counts.functions:
        if not f.lines and not f.branches:
            continue
        out.append("")
        out.append(f"function {f.name}")
        by_line = {}
        for b in f.branches:
            by_line.setdefault(b.line_no, []).append(b)
        for ln in sorted(f.lines, key=lambda x: x.line_no):
            if not ln.instrumented:
                mark = ""
            elif ln.count == 0:
                mark = "######"
            else:
                mark = str(ln.count)
            out.append(f"{mark:>12}    {ln.text}".rstrip())
            for k, b in enumerate(by_line.pop(ln.line_no, ())):
                out.append(_branch_line(k, b))
        for line_no in sorted(by_line):
            for k, b in enumerate(by_line[line_no]):
                out.append(_branch_line(k, b))
    return "\n".join(out) + "\n" if out else ""


def _branch_line(k: int, b: BranchCount) -> str:
    if b.executed == 0:
        return f"branch {k} never executed"
    return f"branch {k} taken = {branch_percent(b.taken, b.executed)}%"


def load_coverage(path) -> CoverageCounts:
    with open(path, encoding="utf-8") as fh:
        return CoverageCounts.from_json(json.load(fh))
