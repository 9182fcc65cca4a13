import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tracekit import events as ev
from tracekit.scenario import bundled_scenario, parse_scenario
from tracekit.simulator import (SamplingPolicy, SimulationDeadlock, emit_samples, run_simulation,
                                simulate)
from tracekit.traceformat import read_trace
from tracekit.workloads import generate_scenario


def _only(truth):
    (bd,) = truth.breakdowns.values()
    return bd


def test_single_compute_then_exit():
    trace, truth = run_simulation(parse_scenario("process main\n  compute 10000\n  exit\n"))
    bd = _only(truth)
    assert bd.elapsed_us == bd.cpu_user_us == 10000
    assert bd.wait_us == 0
    kinds = [type(k) for _, k in trace.per_cpu_events()[0]]
    assert kinds[0] is ev.SchedChange
    assert ev.ProcExit in kinds and kinds[-1] is ev.SchedChange
    last = trace.per_cpu_events()[0][-1][1]
    assert last.out_state is ev.OutState.EXITED


def test_file_read_wait_is_the_latency():
    _, truth = run_simulation(parse_scenario(
        "resources\n  file_latency default 4000\n"
        "process r\n  open /data/log as f\n  read f 100\n  exit\n"))
    assert dict(_only(truth).wait_file_us) == {"log": 4000}


def test_two_cpu_bound_processes_share_one_cpu():
    _, truth = run_simulation(parse_scenario(
        "resources\n  cpus 1\n  quantum 1000\n"
        "process a\n  compute 5000\nprocess b\n  compute 5000\n"))
    a, b = truth.breakdowns.values()
    for bd in (a, b):
        assert bd.cpu_user_us == 5000
        assert abs(bd.wait_cpu_us - 5000) <= 1000
        assert bd.conserved()
    # round robin alternates whole quanta: a finishes one quantum early
    assert (a.wait_cpu_us, b.wait_cpu_us) == (4000, 5000)


def test_deadlock_is_detected():
    with pytest.raises(SimulationDeadlock, match="simulation deadlock"):
        simulate(parse_scenario("process a\n  listen as s\n  accept s as c\n"))


@pytest.mark.parametrize("name", ["galeon", "clients", "batching"])
def test_deterministic(name):
    sc = bundled_scenario(name)
    one, two = simulate(sc, 1), simulate(sc, 1)
    assert one.trace.to_bytes() == two.trace.to_bytes()
    assert one.truth.to_json() == two.truth.to_json()


def test_seed_changes_jittered_latencies():
    sc = bundled_scenario("galeon")
    assert simulate(sc, 0).trace.to_bytes() != simulate(sc, 1).trace.to_bytes()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6))
def test_random_scenario_truth_is_conserved_and_trace_decodes(seed):
    run = simulate(generate_scenario(seed), seed, block_capacity=64)
    for bd in run.truth.breakdowns.values():
        assert bd.conserved()
        assert bd.elapsed_us >= 0
    data = run.trace.to_bytes()
    assert read_trace(data).to_bytes() == data


def test_block_capacity_is_respected():
    run = simulate(bundled_scenario("galeon"), 0, block_capacity=50)
    assert all(len(b.events) <= 50 for b in run.trace.blocks)
    assert run.trace.event_count() == sum(len(v) for v in run.per_cpu_events.values())


def test_irq_around_every_device_wakeup():
    run = simulate(bundled_scenario("read_file"), 0)
    kinds = [k for _, k in run.trace.per_cpu_events()[0]]
    wake = next(i for i, k in enumerate(kinds) if isinstance(k, ev.WakeUp))
    assert isinstance(kinds[wake - 1], ev.IrqEntry)
    assert isinstance(kinds[wake + 1], ev.IrqExit)
    assert run.truth.irq_us == 10 * sum(run.truth.irq_counts.values())


# -- sampling ---------------------------------------------------------------

def test_idle_run_has_empty_histogram():
    run = simulate(parse_scenario("process s\n  sleep 50000\n"))
    assert emit_samples(run, SamplingPolicy.fixed(10000)).total_samples == 0


def test_one_second_at_ten_ms_gives_100_samples():
    run = simulate(parse_scenario("process p\n  compute 1000000 fn hot\n"))
    hist = emit_samples(run, SamplingPolicy.fixed(10000))
    assert hist.total_samples == 100
    assert hist.counts[hist.bucket_of(run.symbols.address_of("hot"))] == 100
    assert hist.period_s == 0.01


def test_jitter_periods_stay_in_range():
    policy = SamplingPolicy.jittered(20000, 10000, seed=4)
    t = policy.instants(10**8)
    steps = np.diff(t)
    assert t[0] == 0
    assert steps.min() >= 10000 and steps.max() <= 30000
    assert abs(steps.mean() - 20000) < 200
    assert np.array_equal(t, SamplingPolicy.jittered(20000, 10000, seed=4).instants(10**8))


@pytest.mark.parametrize("text", ["fixed", "fixed:0", "jitter:100:100", "jitter:1", "every:5"])
def test_bad_sampling_policy(text):
    with pytest.raises(ValueError):
        SamplingPolicy.parse(text)


def test_truth_function_fractions_sum_to_one():
    run = simulate(bundled_scenario("phases"), 0)
    fr = run.truth.function_fractions
    assert fr["phase_a"] == pytest.approx(0.5)
    assert sum(fr.values()) == pytest.approx(1.0)
