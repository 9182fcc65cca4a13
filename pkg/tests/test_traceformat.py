import random
import struct

import pytest
from hypothesis import given, settings

from strategies import event_kinds, random_trace, traces
from tracekit import events as ev
from tracekit.events import OutState, Timestamp
from tracekit.traceformat import (BadMagic, DeltaRegression, MAX_DELTA, ProcessInfo, ProcState,
                                  Snapshot, TraceOrderError, TruncatedTrace, UnknownEventCode,
                                  decode_trace, dump_trace, encode_event, encode_trace,
                                  read_trace)

SNAP = Snapshot((ProcessInfo(7, 1, "init", ProcState.RUNNING),), {0: 7}, Timestamp(1000, 0))


def _events(snap, n, start=None):
    t = (start or snap.start).to_us()
    return [(Timestamp.from_us(t + 10 * i), ev.FsRead(3, i)) for i in range(n)]


@settings(max_examples=200, deadline=None)
@given(traces())
def test_round_trip(trace):
    snap, events = trace
    data = encode_trace(snap, events, block_capacity=16)
    snap2, events2 = decode_trace(data)
    assert snap2 == snap
    assert {c: e for c, e in events2.items() if e} == {c: e for c, e in events.items() if e}
    assert encode_trace(snap2, events2, block_capacity=16) == data


@settings(max_examples=100, deadline=None)
@given(traces())
def test_decoded_timestamps_monotone_per_cpu(trace):
    _, events = decode_trace(encode_trace(*trace, block_capacity=8))
    for items in events.values():
        stamps = [ts for ts, _ in items]
        assert stamps == sorted(stamps)


@given(event_kinds)
def test_each_event_code_is_fixed(kind):
    assert encode_event(kind)[0] == ev.EVENT_CODES[type(kind)]


def test_event_codes_are_one_through_26():
    assert sorted(ev.EVENT_CODES.values()) == list(range(1, 27))
    assert ev.EVENT_CODES[ev.SchedChange] == 1 and ev.EVENT_CODES[ev.Sample] == 26


def test_empty_trace_has_no_blocks():
    data = encode_trace(SNAP, {})
    trace = read_trace(data)
    assert trace.blocks == [] and trace.snapshot == SNAP
    assert dump_trace(trace) == ""


def test_header_bytes():
    data = encode_trace(SNAP, {})
    assert data[:4] == b"LTR1"
    assert struct.unpack_from("<H", data, 4) == (1,)


def test_delta_overflow_splits_block():
    items = [(Timestamp.from_us(1_000_000_000), ev.TrapExit()),
             (Timestamp.from_us(1_000_000_000 + 5_000_000_000), ev.TrapExit())]
    trace = read_trace(encode_trace(SNAP, {0: items}))
    assert len(trace.blocks) == 2
    assert [ts for ts, _ in trace.per_cpu_events()[0]] == [ts for ts, _ in items]


def test_largest_delta_stays_in_block():
    items = [(Timestamp.from_us(0), ev.TrapExit()), (Timestamp.from_us(MAX_DELTA), ev.TrapExit())]
    assert len(read_trace(encode_trace(SNAP, {0: items})).blocks) == 1


def test_capacity_64_with_500_events_gives_8_blocks():
    rng = random.Random(3)
    t = SNAP.start.to_us()
    items = []
    for _ in range(500):
        t += rng.randrange(3000)
        items.append((Timestamp.from_us(t), ev.FsWrite(rng.randrange(64), rng.randrange(9999))))
    data = encode_trace(SNAP, {0: items}, block_capacity=64)
    trace = read_trace(data)
    assert len(trace.blocks) == 8
    assert trace.per_cpu_events()[0] == items


def test_out_of_order_input_rejected():
    items = [(Timestamp(5, 0), ev.TrapExit()), (Timestamp(4, 999_999), ev.TrapExit())]
    with pytest.raises(TraceOrderError):
        encode_trace(SNAP, {0: items})


def test_bad_magic():
    data = bytearray(encode_trace(SNAP, {0: _events(SNAP, 3)}))
    data[0] = ord("X")
    with pytest.raises(BadMagic, match="bad magic at offset 0"):
        read_trace(bytes(data))


def _block_offset(data):
    return len(encode_trace(SNAP, {}))


EVENT_SIZE = 4 + len(encode_event(ev.FsRead(3, 0)))


def test_block_with_missing_events_is_truncated():
    data = encode_trace(SNAP, {0: _events(SNAP, 10)})
    off = _block_offset(data)
    # keep the header's count of 10 but cut the body to 7 events
    body = data[off + 22:off + 22 + 7 * EVENT_SIZE]
    header = bytearray(data[off:off + 22])
    struct.pack_into("<I", header, 18, len(body))
    with pytest.raises(TruncatedTrace, match="declares 10 events but contains 7"):
        read_trace(data[:off] + bytes(header) + body)


def test_file_cut_short():
    data = encode_trace(SNAP, {0: _events(SNAP, 10)})
    with pytest.raises(TruncatedTrace):
        read_trace(data[:-5])


def test_unknown_event_code():
    data = bytearray(encode_trace(SNAP, {0: _events(SNAP, 2)}))
    off = _block_offset(data) + 22
    data[off + 4] = 99
    with pytest.raises(UnknownEventCode, match=f"offset {off + 4}"):
        read_trace(bytes(data))


def test_delta_regression():
    data = bytearray(encode_trace(SNAP, {0: _events(SNAP, 3)}))
    off = _block_offset(data) + 22
    struct.pack_into("<I", data, off + 2 * EVENT_SIZE, 5)  # third event delta below the second (10)
    with pytest.raises(DeltaRegression):
        read_trace(bytes(data))


def test_dump_line_format():
    snap = Snapshot((ProcessInfo(1684, 1, "galeon", ProcState.RUNNING),
                     ProcessInfo(1579, 1, "X", ProcState.RUNNABLE)), {0: 1684})
    kind = ev.SchedChange(1579, 1684, OutState.BLOCKED)
    trace = read_trace(encode_trace(snap, {0: [(Timestamp(1018876582, 807645), kind)]}))
    assert dump_trace(trace, {0: 1684}) == \
        "SchedChange 1018876582.807645 1684 IN:1579 OUT:1684 STATE:Blocked\n"
    assert dump_trace(trace) == "SchedChange 1018876582.807645 - IN:1579 OUT:1684 STATE:Blocked\n"


def test_seeded_random_traces_reencode_identically():
    for seed in range(20):
        snap, events = random_trace(random.Random(seed))
        data = encode_trace(snap, events, 32)
        assert encode_trace(*decode_trace(data), 32) == data
