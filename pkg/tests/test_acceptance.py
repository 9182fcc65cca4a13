"""End-to-end acceptance checks.  Each test reports one PASS/FAIL line, collected
into the "acceptance criteria" section of the pytest summary."""

import json
import random
import time
from fractions import Fraction
from pathlib import Path

from strategies import random_trace
from tracekit.cli import main
from tracekit.clients import attribute_cpu
from tracekit.profile import (branch_percent, coverage_report,
                              function_samples, load_coverage, load_profile)
from tracekit.scenario import bundled_scenario, bundled_scenario_text
from tracekit.simulator import SamplingPolicy, emit_samples, simulate
from tracekit.traceformat import decode_trace, encode_trace, encode_trace_full_timestamps
from tracekit.waits import analyze_trace, decompose
from tracekit.workloads import generate_scenario

ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data"
GOLDEN = ROOT / "tests" / "golden"


def _report(record_property, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    record_property("acceptance", line)
    print(line)
    assert ok, line


def test_criterion_1_conservation(record_property):
    start = time.perf_counter()
    processes = broken = 0
    for seed in range(1000):
        run = simulate(generate_scenario(seed), seed)
        for bd in analyze_trace(run.trace).breakdowns.values():
            processes += 1
            if not bd.conserved():
                broken += 1
    elapsed = time.perf_counter() - start
    _report(record_property, 1, broken == 0 and elapsed < 30.0,
            f"(1000 scenarios, {processes} processes, {broken} not conserved, {elapsed:.1f} s)")


# the rule each canonical scenario is built to exercise, and a breakdown
# entry that only that rule can produce
CANONICAL = {
    "read_file": lambda b: "log" in b.wait_file_us,
    "page_fault": lambda b: any(k != "log" for k in b.wait_file_us),
    "waitpid": lambda b: bool(b.wait_process_us),
    "poll_file": lambda b: bool(b.wait_file_us),
    "wait_any": lambda b: bool(b.wait_process_us),
    "poll_timeout": lambda b: b.wait_timeout_us > 0,
    "generic": lambda b: bool(b.wait_generic_us) or b.wait_fork_us > 0,
    "galeon": lambda b: bool(b.wait_file_us),
}


def test_criterion_2_oracle_equivalence(record_property):
    mismatched, unexercised = [], []
    for name, exercised in CANONICAL.items():
        run = simulate(bundled_scenario(name), 0)
        analysis = analyze_trace(run.trace)
        got = decompose(analysis.replay, analysis.attributed)
        if set(got) != set(run.truth.breakdowns) or any(
                got[pid].normalized() != t.normalized() for pid, t in run.truth.breakdowns.items()):
            mismatched.append(name)
        if not any(exercised(b) for b in got.values()):
            unexercised.append(name)
    ok = not mismatched and not unexercised
    _report(record_property, 2, ok,
            f"({len(CANONICAL)} scenarios; mismatched {mismatched or 'none'}; "
            f"rule not exercised {unexercised or 'none'})")


def test_criterion_3_flat_profile(record_property):
    flat = load_profile(DATA / "gzip_profile.json").flat()
    expected = {"fill_window": (27.13, 7.53), "deflate": (23.20, 13.97), "updcrc": (14.84, 18.09)}
    bad = []
    for name, (pct, cum) in expected.items():
        row = flat.row(name)
        if abs(row.percent - pct) > 0.01 or abs(row.cumulative_s - cum) > 0.01 + 1e-9:
            bad.append(f"{name} {row.percent:.4f}% {row.cumulative_s:.4f}s")
    text = flat.render()
    printed = " 27.13      7.53     7.53     1957" in text
    _report(record_property, 3, not bad and printed,
            f"(fill_window/deflate/updcrc within 0.01; off: {bad or 'none'})")


def test_criterion_4_call_graph(record_property):
    graph = load_profile(DATA / "gzip_profile.json").graph()
    file_read = graph.functions["file_read"]
    fill = graph.functions["fill_window"]
    (to_file_read,) = [c for c in fill.callees if c.name == "file_read"]
    share = to_file_read.self_s + to_file_read.children_s
    want = Fraction(1957, 1958) * Fraction(file_read.total_s).limit_denominator(10**9)
    text = graph.render()
    ok = (f"{file_read.children_s:.2f}" == "4.12"
          and abs(share - float(want)) < 1e-9
          and (to_file_read.calls, to_file_read.total_calls) == (1957, 1958)
          and f"{1000 * fill.total_s / fill.calls:.2f}" == "5.95"
          and "0.00      4.12     1957/1958      file_read" in text)
    _report(record_property, 4, ok,
            f"(file_read children {file_read.children_s:.2f}, fill_window share "
            f"{share:.4f} of {file_read.total_s:.4f} at 1957/1958, "
            f"total/call {1000 * fill.total_s / fill.calls:.2f} ms)")


def test_criterion_5_coverage(record_property):
    text = coverage_report(load_coverage(DATA / "lm_init_coverage.json"))
    lines = ["80.77% of 26 source lines executed in function lm_init",
             "60.00% of 15 branches executed in function lm_init",
             "40.00% of 15 branches taken at least once in function lm_init"]
    ok = all(line in text.splitlines() for line in lines)
    ok = ok and branch_percent(554694, 6933680) == 8 and "taken = 8%" in text
    _report(record_property, 5, ok, "(lm_init 80.77/60.00/40.00, 554694/6933680 taken = 8%)")


def _phase_a_share(run, policy):
    samples = function_samples(emit_samples(run, policy), run.symbols)
    return samples["phase_a"], sum(samples.values())


def _brute_force_fixed(run, period):
    """Which phase is running at each fixed sampling instant, from the schedule."""
    a = total = 0
    segments = sorted((s, e, fn) for _, s, e, fn, _ in run.segments)
    i = 0
    for t in range(0, run.end_us, period):
        while i < len(segments) and segments[i][1] <= t:
            i += 1
        if i < len(segments) and segments[i][0] <= t:
            total += 1
            a += segments[i][2] == "phase_a"
    return a, total


def test_criterion_6_sampling_bias(record_property):
    run = simulate(bundled_scenario("phases"), 0)
    fixed_a, fixed_n = _phase_a_share(run, SamplingPolicy.fixed(20000))
    oracle = _brute_force_fixed(run, 20000)
    a = n = 0
    for seed in range(3):
        sa, sn = _phase_a_share(run, SamplingPolicy.jittered(20000, 10000, seed))
        a, n = a + sa, n + sn
    fixed_pct = 100 * fixed_a / fixed_n
    jitter_pct = 100 * a / n
    ok = (fixed_pct >= 95 and (fixed_a, fixed_n) == oracle
          and n >= 10000 and abs(jitter_pct - 50) <= 3)
    _report(record_property, 6, ok,
            f"(fixed: A {fixed_pct:.2f}% of {fixed_n}, schedule says {oracle[0]}/{oracle[1]}; "
            f"jittered: A {jitter_pct:.2f}% of {n})")


def test_criterion_7_client_attribution(record_property):
    run = simulate(bundled_scenario("clients"), 0)
    a = analyze_trace(run.trace)
    prof = attribute_cpu(a.replay, a.attributed)
    exact = set(prof) == set(run.truth.servers) and all(
        p.init_cpu_us == run.truth.servers[pid].init_cpu_us
        and +p.per_client_cpu_us == +run.truth.servers[pid].per_client_cpu_us
        for pid, p in prof.items())

    run = simulate(bundled_scenario("batching"), 0)
    a = analyze_trace(run.trace)
    names = {pid: st.name for pid, st in a.replay.processes.items()}
    (server,) = attribute_cpu(a.replay, a.attributed).values()
    truth = run.truth.servers[server.server_pid]
    got = {names[c]: us for c, us in server.per_client_cpu_us.items()}
    true = {names[c]: us for c, us in truth.per_client_cpu_us.items()}
    last = max(got, key=got.get)
    overestimated = last == "client10" and got[last] > 5 * true[last]
    _report(record_property, 7, exact and overestimated,
            f"(two clients exact: {exact}; batch charged to {last}: "
            f"{got[last]} us against {true[last]} us true)")


def test_criterion_8_format(record_property):
    rng = random.Random(20020415)
    identical = 0
    for _ in range(200):
        snap, events = random_trace(rng)
        data = encode_trace(snap, events)
        identical += encode_trace(*decode_trace(data)) == data
    run = simulate(bundled_scenario("galeon"), 0)
    delta = encode_trace(run.trace.snapshot, run.per_cpu_events)
    full = encode_trace_full_timestamps(run.trace.snapshot, run.per_cpu_events)
    saving = 1 - len(delta) / len(full)
    _report(record_property, 8, identical == 200 and saving >= 0.30,
            f"({identical}/200 byte-identical; delta {len(delta)} B vs full {len(full)} B, "
            f"{100 * saving:.1f}% smaller)")


def test_criterion_9_golden_reports(record_property, tmp_path):
    scn = tmp_path / "galeon.scn"
    scn.write_text(bundled_scenario_text("galeon"))
    outputs = []
    for r in range(2):
        trace = tmp_path / f"run{r}.ltr"
        truth = tmp_path / f"truth{r}.json"
        assert main(["simulate", str(scn), "--trace", str(trace), "--truth", str(truth),
                     "--seed", "0"]) == 0
        files = {"galeon.ltr": trace.read_bytes()}
        for cmd in ("analyze", "attribute", "dump"):
            out = tmp_path / f"{cmd}{r}.txt"
            assert main([cmd, str(trace), "-o", str(out)]) == 0
            files[f"galeon_{cmd}.txt"] = out.read_bytes()
        outputs.append(files)
        outputs[-1]["truth"] = json.loads(truth.read_text())
    golden_truth = json.loads((GOLDEN / "galeon_truth.json").read_text())
    differ = [name for name in outputs[0] if name != "truth"
              and not (outputs[0][name] == outputs[1][name] == (GOLDEN / name).read_bytes())]
    if not outputs[0]["truth"] == outputs[1]["truth"] == golden_truth:
        differ.append("galeon_truth.json")
    _report(record_property, 9, not differ,
            f"(trace, analyze, attribute, dump and truth over two runs; differing: "
            f"{differ or 'none'})")
