"""Binary trace files: block-structured events with 32-bit microsecond deltas.

Layout (little-endian)::

    "LTR1"  version:u16  block_capacity:u32
    snapshot: start_s:u64 start_us:u32 nproc:u32 {pid:u32 ppid:u32 state:u8 name:str}*
              ncpu:u16 {cpu:u16 pid:u32}*
    blocks:   {cpu:u16 start_s:u64 start_us:u32 count:u32 nbytes:u32 events...}*
    event:    delta_us:u32 code:u8 payload

Strings are a u16 byte length followed by UTF-8.  Blocks are written in
(start, cpu) order and the first event of a block always has delta 0, so a
decoded file re-encodes to identical bytes.
"""

from __future__ import annotations

import enum
import heapq
import struct
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from . import events as ev
from .events import Timestamp

MAGIC = b"LTR1"
FULL_MAGIC = b"LTF1"
VERSION = 1
DEFAULT_BLOCK_CAPACITY = 4096
MAX_DELTA = 0xFFFFFFFF
IDLE_PID = 0

_FILE_HEADER = struct.Struct("<4sHI")
_SNAP_HEADER = struct.Struct("<QII")
_PROC = struct.Struct("<IIB")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_CPU = struct.Struct("<HI")
_BLOCK_HEADER = struct.Struct("<HQIII")
_EVENT_HEADER = struct.Struct("<IB")


class ProcState(enum.IntEnum):
    RUNNING = 0
    RUNNABLE = 1
    BLOCKED = 2


@dataclass(frozen=True)
class ProcessInfo:
    pid: int
    parent_pid: int
    name: str
    state: ProcState


@dataclass(frozen=True)
class Snapshot:
    """Process table at trace start.  pid 0 is the per-cpu idle task and is not listed."""

    processes: tuple
    running: Mapping[int, int]
    start: Timestamp = Timestamp(0, 0)

    def __post_init__(self):
        object.__setattr__(self, "processes", tuple(self.processes))
        object.__setattr__(self, "running", dict(sorted(self.running.items())))

    def validate(self):
        pids = [p.pid for p in self.processes]
        if len(set(pids)) != len(pids):
            raise ValueError("duplicate pid in snapshot")
        if IDLE_PID in pids:
            raise ValueError("pid 0 is reserved for the idle task")
        running = [p.pid for p in self.processes if p.state is ProcState.RUNNING]
        on_cpu = [pid for pid in self.running.values() if pid != IDLE_PID]
        if sorted(running) != sorted(on_cpu):
            raise ValueError("running processes do not match the cpu map")

    def process(self, pid: int) -> Optional[ProcessInfo]:
        for p in self.processes:
            if p.pid == pid:
                return p
        return None


@dataclass(frozen=True)
class RawEvent:
    delta_us: int
    kind: object


@dataclass(frozen=True)
class TraceBlock:
    cpu_id: int
    start: Timestamp
    events: tuple


@dataclass
class TraceFile:
    snapshot: Snapshot
    blocks: list = field(default_factory=list)
    block_capacity: int = DEFAULT_BLOCK_CAPACITY

    def per_cpu_events(self) -> dict:
        out = {cpu: [] for cpu in self.snapshot.running}
        for block in self.blocks:
            base = block.start.to_us()
            lst = out.setdefault(block.cpu_id, [])
            for raw in block.events:
                lst.append((Timestamp.from_us(base + raw.delta_us), raw.kind))
        return dict(sorted(out.items()))

    def event_count(self) -> int:
        return sum(len(b.events) for b in self.blocks)

    def to_bytes(self) -> bytes:
        return encode_trace(self.snapshot, self.per_cpu_events(), self.block_capacity)


class TraceOrderError(ValueError):
    pass


class TraceDecodeError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class BadMagic(TraceDecodeError):
    pass


class TruncatedTrace(TraceDecodeError):
    pass


class UnknownEventCode(TraceDecodeError):
    pass


class DeltaRegression(TraceDecodeError):
    pass


class MalformedTrace(TraceDecodeError):
    pass


# -- payload codecs ---------------------------------------------------------

class _Fixed:
    def __init__(self, fmt, to_fields, from_fields):
        self.struct = struct.Struct("<" + fmt)
        self.to_fields = to_fields
        self.from_fields = from_fields

    def pack(self, e) -> bytes:
        return self.struct.pack(*self.to_fields(e))

    def unpack(self, buf, off):
        end = off + self.struct.size
        if end > len(buf):
            raise TruncatedTrace("truncated event payload", off)
        return self.from_fields(self.struct.unpack_from(buf, off)), end


class _WithString:
    """Fixed fields followed by one length-prefixed string."""

    def __init__(self, fmt, to_fields, from_fields):
        self.fixed = struct.Struct("<" + fmt)
        self.to_fields = to_fields
        self.from_fields = from_fields

    def pack(self, e) -> bytes:
        *nums, text = self.to_fields(e)
        raw = text.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError("string payload too long")
        return self.fixed.pack(*nums) + _U16.pack(len(raw)) + raw

    def unpack(self, buf, off):
        nums = ()
        if self.fixed.size:
            if off + self.fixed.size > len(buf):
                raise TruncatedTrace("truncated event payload", off)
            nums = self.fixed.unpack_from(buf, off)
            off += self.fixed.size
        text, off = _read_str(buf, off)
        return self.from_fields(nums, text), off


def _read_str(buf, off):
    if off + 2 > len(buf):
        raise TruncatedTrace("truncated string length", off)
    (n,) = _U16.unpack_from(buf, off)
    if off + 2 + n > len(buf):
        raise TruncatedTrace("truncated string", off)
    try:
        return bytes(buf[off + 2:off + 2 + n]).decode("utf-8"), off + 2 + n
    except UnicodeDecodeError:
        raise MalformedTrace("invalid utf-8 string", off) from None


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("string too long")
    return _U16.pack(len(raw)) + raw


_CODECS = {
    ev.SchedChange: _Fixed("IIB", lambda e: (e.in_pid, e.out_pid, e.out_state),
                           lambda v: ev.SchedChange(v[0], v[1], ev.OutState(v[2]))),
    ev.WakeUp: _Fixed("IBQ", lambda e: (e.pid, e.source.kind, e.source.ref),
                      lambda v: ev.WakeUp(v[0], ev.WaitSource(ev.SourceKind(v[1]), v[2]))),
    ev.SyscallEntry: _Fixed("HQ", lambda e: (e.syscall_id, e.arg), lambda v: ev.SyscallEntry(*v)),
    ev.SyscallExit: _Fixed("q", lambda e: (e.return_value,), lambda v: ev.SyscallExit(*v)),
    ev.TrapEntry: _Fixed("HQ", lambda e: (e.trap_id, e.fault_address), lambda v: ev.TrapEntry(*v)),
    ev.TrapExit: _Fixed("", lambda e: (), lambda v: ev.TrapExit()),
    ev.FsOpen: _WithString("I", lambda e: (e.fd, e.path), lambda v, s: ev.FsOpen(v[0], s)),
    ev.FsClose: _Fixed("I", lambda e: (e.fd,), lambda v: ev.FsClose(*v)),
    ev.FsRead: _Fixed("IQ", lambda e: (e.fd, e.byte_count), lambda v: ev.FsRead(*v)),
    ev.FsWrite: _Fixed("IQ", lambda e: (e.fd, e.byte_count), lambda v: ev.FsWrite(*v)),
    ev.FsPoll: _Fixed("I", lambda e: (e.fd,), lambda v: ev.FsPoll(*v)),
    ev.FsPollTimeout: _Fixed("Q", lambda e: (e.timeout_us,), lambda v: ev.FsPollTimeout(*v)),
    ev.FsExec: _WithString("", lambda e: (e.name,), lambda v, s: ev.FsExec(s)),
    ev.MemMmap: _Fixed("QQi", lambda e: (e.start_address, e.length,
                                         -1 if e.backing is None else e.backing),
                       lambda v: ev.MemMmap(v[0], v[1], _backing(v[2]))),
    ev.MemMunmap: _Fixed("Q", lambda e: (e.start_address,), lambda v: ev.MemMunmap(*v)),
    ev.SockListen: _Fixed("I", lambda e: (e.fd,), lambda v: ev.SockListen(*v)),
    ev.SockConnect: _Fixed("IQ", lambda e: (e.fd, e.conn_token), lambda v: ev.SockConnect(*v)),
    ev.SockAccept: _Fixed("IIQ", lambda e: (e.listen_fd, e.new_fd, e.conn_token),
                          lambda v: ev.SockAccept(*v)),
    ev.ProcFork: _Fixed("I", lambda e: (e.child_pid,), lambda v: ev.ProcFork(*v)),
    ev.ProcExit: _Fixed("i", lambda e: (e.code,), lambda v: ev.ProcExit(*v)),
    ev.ProcWaitpid: _Fixed("I", lambda e: (e.target_pid,), lambda v: ev.ProcWaitpid(*v)),
    ev.TimerSet: _Fixed("QI", lambda e: (e.expiry.seconds, e.expiry.micros),
                        lambda v: ev.TimerSet(Timestamp(*v))),
    ev.TimerExpire: _Fixed("I", lambda e: (e.pid,), lambda v: ev.TimerExpire(*v)),
    ev.IrqEntry: _Fixed("H", lambda e: (e.irq_id,), lambda v: ev.IrqEntry(*v)),
    ev.IrqExit: _Fixed("", lambda e: (), lambda v: ev.IrqExit()),
    ev.Sample: _Fixed("Q", lambda e: (e.instruction_address,), lambda v: ev.Sample(*v)),
}
_DECODERS = {ev.EVENT_CODES[cls]: codec for cls, codec in _CODECS.items()}


def _backing(raw: int):
    if raw == -1:
        return None
    if raw < 0:
        raise ValueError("negative backing descriptor")
    return raw


def encode_event(kind) -> bytes:
    """Code byte plus payload for one event."""
    cls = type(kind)
    try:
        codec = _CODECS[cls]
    except KeyError:
        raise TypeError(f"not a trace event: {kind!r}") from None
    try:
        return bytes((ev.EVENT_CODES[cls],)) + codec.pack(kind)
    except struct.error as exc:
        raise ValueError(f"field out of range in {kind!r}: {exc}") from None


# -- encoding ---------------------------------------------------------------

def _encode_snapshot(snapshot: Snapshot) -> bytes:
    snapshot.validate()
    out = [_SNAP_HEADER.pack(snapshot.start.seconds, snapshot.start.micros, len(snapshot.processes))]
    for p in snapshot.processes:
        out.append(_PROC.pack(p.pid, p.parent_pid, p.state))
        out.append(_pack_str(p.name))
    out.append(_U16.pack(len(snapshot.running)))
    for cpu, pid in snapshot.running.items():
        out.append(_CPU.pack(cpu, pid))
    return b"".join(out)


def build_blocks(events: Mapping[int, Sequence], block_capacity: int) -> list:
    """Split per-cpu (Timestamp, event) lists into blocks, in file order."""
    if block_capacity < 1:
        raise ValueError("block_capacity must be >= 1")
    blocks = []
    for cpu, items in events.items():
        current, start_us, last_us = [], None, None
        for ts, kind in items:
            us = ts.to_us()
            if last_us is not None and us < last_us:
                raise TraceOrderError(f"cpu {cpu}: timestamp {ts} precedes previous event")
            if current and (len(current) >= block_capacity or us - start_us > MAX_DELTA):
                blocks.append(TraceBlock(cpu, Timestamp.from_us(start_us), tuple(current)))
                current = []
            if not current:
                start_us = us
            current.append(RawEvent(us - start_us, kind))
            last_us = us
        if current:
            blocks.append(TraceBlock(cpu, Timestamp.from_us(start_us), tuple(current)))
    blocks.sort(key=lambda b: (b.start, b.cpu_id))
    return blocks


def encode_trace(snapshot: Snapshot, events: Mapping[int, Sequence],
                 block_capacity: int = DEFAULT_BLOCK_CAPACITY) -> bytes:
    out = [_FILE_HEADER.pack(MAGIC, VERSION, block_capacity), _encode_snapshot(snapshot)]
    for block in build_blocks(events, block_capacity):
        body = b"".join(_U32.pack(r.delta_us) + encode_event(r.kind)
                        for r in block.events)
        out.append(_BLOCK_HEADER.pack(block.cpu_id, block.start.seconds, block.start.micros,
                                      len(block.events), len(body)))
        out.append(body)
    return b"".join(out)


def encode_trace_full_timestamps(snapshot: Snapshot, events: Mapping[int, Sequence],
                                 block_capacity: int = DEFAULT_BLOCK_CAPACITY) -> bytes:
    """Variant layout storing a 12-byte absolute timestamp with every event.

    Only used to measure what delta encoding saves; there is no decoder.
    """
    out = [_FILE_HEADER.pack(FULL_MAGIC, VERSION, block_capacity), _encode_snapshot(snapshot)]
    for block in build_blocks(events, block_capacity):
        base = block.start.to_us()
        parts = []
        for r in block.events:
            ts = Timestamp.from_us(base + r.delta_us)
            parts.append(struct.pack("<QI", ts.seconds, ts.micros) + encode_event(r.kind))
        body = b"".join(parts)
        out.append(_BLOCK_HEADER.pack(block.cpu_id, block.start.seconds, block.start.micros,
                                      len(block.events), len(body)))
        out.append(body)
    return b"".join(out)


# -- decoding ---------------------------------------------------------------

def _decode_snapshot(buf, off):
    if off + _SNAP_HEADER.size > len(buf):
        raise TruncatedTrace("truncated snapshot header", off)
    sec, us, nproc = _SNAP_HEADER.unpack_from(buf, off)
    try:
        start = Timestamp(sec, us)
    except ValueError:
        raise MalformedTrace("invalid snapshot timestamp", off) from None
    off += _SNAP_HEADER.size
    procs = []
    for _ in range(nproc):
        if off + _PROC.size > len(buf):
            raise TruncatedTrace("truncated process record", off)
        pid, ppid, state = _PROC.unpack_from(buf, off)
        try:
            state = ProcState(state)
        except ValueError:
            raise MalformedTrace(f"invalid process state {state}", off) from None
        name, off = _read_str(buf, off + _PROC.size)
        procs.append(ProcessInfo(pid, ppid, name, state))
    if off + 2 > len(buf):
        raise TruncatedTrace("truncated cpu table", off)
    (ncpu,) = _U16.unpack_from(buf, off)
    off += 2
    running, last_cpu = {}, -1
    for _ in range(ncpu):
        if off + _CPU.size > len(buf):
            raise TruncatedTrace("truncated cpu record", off)
        cpu, pid = _CPU.unpack_from(buf, off)
        if cpu <= last_cpu:
            raise MalformedTrace("cpu table not in ascending order", off)
        running[cpu] = pid
        last_cpu = cpu
        off += _CPU.size
    snap = Snapshot(tuple(procs), running, start)
    try:
        snap.validate()
    except ValueError as exc:
        raise MalformedTrace(f"invalid snapshot ({exc})", off) from None
    return snap, off


def _decode_block(buf, off, capacity):
    header_off = off
    if off + _BLOCK_HEADER.size > len(buf):
        raise TruncatedTrace("truncated block header", off)
    cpu, sec, us, count, nbytes = _BLOCK_HEADER.unpack_from(buf, off)
    try:
        start = Timestamp(sec, us)
    except ValueError:
        raise MalformedTrace("invalid block timestamp", off) from None
    if count == 0 or count > capacity:
        raise MalformedTrace(f"block event count {count} outside 1..{capacity}", off)
    off += _BLOCK_HEADER.size
    end = off + nbytes
    if end > len(buf):
        raise TruncatedTrace(f"block declares {nbytes} bytes but only {len(buf) - off} remain", off)
    body = memoryview(buf)[:end]
    raws, last = [], 0
    for i in range(count):
        if off + _EVENT_HEADER.size > end:
            raise TruncatedTrace(f"block declares {count} events but contains {i}", off)
        delta, code = _EVENT_HEADER.unpack_from(body, off)
        if i == 0 and delta != 0:
            raise MalformedTrace("first event of a block must have delta 0", off)
        if delta < last:
            raise DeltaRegression(f"delta {delta} regresses below {last}", off)
        codec = _DECODERS.get(code)
        if codec is None:
            raise UnknownEventCode(f"unknown event code {code}", off + 4)
        try:
            kind, next_off = codec.unpack(body, off + _EVENT_HEADER.size)
        except TruncatedTrace:
            raise TruncatedTrace(f"block declares {count} events but contains {i}", off) from None
        except ValueError as exc:
            if isinstance(exc, TraceDecodeError):
                raise
            raise MalformedTrace(f"invalid payload for code {code} ({exc})", off) from None
        raws.append(RawEvent(delta, kind))
        last, off = delta, next_off
    if off != end:
        raise MalformedTrace(f"block has {end - off} trailing bytes", off)
    return TraceBlock(cpu, start, tuple(raws)), end, header_off


def read_trace(data: bytes) -> TraceFile:
    buf = bytes(data)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("bad magic", 0)
    if len(buf) < _FILE_HEADER.size:
        raise TruncatedTrace("truncated file header", 4)
    _, version, capacity = _FILE_HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise MalformedTrace(f"unsupported version {version}", 4)
    if capacity < 1:
        raise MalformedTrace("block capacity must be positive", 6)
    snapshot, off = _decode_snapshot(buf, _FILE_HEADER.size)
    blocks = []
    last_key = None
    open_block = {}  # cpu -> previous block on that cpu
    while off < len(buf):
        block, off, header_off = _decode_block(buf, off, capacity)
        key = (block.start, block.cpu_id)
        if last_key is not None and key < last_key:
            raise MalformedTrace("blocks not in start-time order", header_off)
        prev = open_block.get(block.cpu_id)
        if prev is not None:
            prev_last = prev.start.to_us() + prev.events[-1].delta_us
            gap = block.start.to_us() - prev.start.to_us()
            if block.start.to_us() < prev_last:
                raise MalformedTrace("block overlaps previous block on its cpu", header_off)
            if len(prev.events) < capacity and gap <= MAX_DELTA:
                raise MalformedTrace("block split before capacity without delta overflow",
                                     header_off)
        open_block[block.cpu_id] = block
        last_key = key
        blocks.append(block)
    return TraceFile(snapshot, blocks, capacity)


def decode_trace(data: bytes):
    """Return (snapshot, {cpu: [(Timestamp, event), ...]})."""
    trace = read_trace(data)
    return trace.snapshot, trace.per_cpu_events()


# -- ordering and text dump -------------------------------------------------

def merge_events(per_cpu: Mapping[int, Sequence]) -> list:
    """Global order: time, then cpu id, then position within the cpu stream."""
    def stream(cpu, items):
        for i, (ts, kind) in enumerate(items):
            yield ts.to_us(), cpu, i, ts, kind

    streams = [stream(cpu, items) for cpu, items in sorted(per_cpu.items())]
    return [(ts, cpu, kind) for _, cpu, _, ts, kind in heapq.merge(*streams)]


def dump_trace(trace: TraceFile, pid_annotations: Optional[Mapping[int, int]] = None) -> str:
    """One line per event in global order: kind, time, pid (or '-'), payload."""
    lines = []
    for i, (ts, _cpu, kind) in enumerate(merge_events(trace.per_cpu_events())):
        pid = "-"
        if pid_annotations is not None and i in pid_annotations:
            pid = str(pid_annotations[i])
        payload = ev.describe(kind)
        parts = [ev.kind_name(kind), str(ts), pid]
        if payload:
            parts.append(payload)
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


def iter_events(trace: TraceFile) -> Iterable:
    return iter(merge_events(trace.per_cpu_events()))
