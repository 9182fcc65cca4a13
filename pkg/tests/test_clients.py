import json

import pytest
from hypothesis import given, settings, strategies as st

from tracekit.clients import attribute_cpu, clients_json, detect_servers, render_clients
from tracekit.scenario import bundled_scenario, parse_scenario
from tracekit.simulator import simulate
from tracekit.waits import analyze_trace
from tracekit.workloads import generate_scenario


def _run(sc, seed=0):
    run = simulate(sc, seed)
    a = analyze_trace(run.trace)
    return run, a, attribute_cpu(a.replay, a.attributed)


def _names(a):
    return {pid: st.name for pid, st in a.replay.processes.items()}


def _same(profile, truth):
    return (profile.init_cpu_us == truth.init_cpu_us
            and +profile.per_client_cpu_us == +truth.per_client_cpu_us)


@pytest.mark.parametrize("name", ["clients", "galeon", "generic"])
@pytest.mark.parametrize("seed", [0, 3])
def test_matches_ground_truth_without_batching(name, seed):
    run, a, prof = _run(bundled_scenario(name), seed)
    assert set(prof) == set(run.truth.servers)
    for pid, p in prof.items():
        assert _same(p, run.truth.servers[pid])


def test_alternating_two_clients():
    run, a, prof = _run(bundled_scenario("clients"))
    names = _names(a)
    (server,) = prof.values()
    per = {names[c]: us for c, us in server.per_client_cpu_us.items()}
    # bob's requests cost 1500 us of serving against alice's 1000 us
    assert per["bob"] > per["alice"] > 3000
    assert server.init_cpu_us >= 800


def test_callback_makes_both_sides_servers():
    run, a, prof = _run(bundled_scenario("galeon"))
    names = _names(a)
    by_name = {names[pid]: p for pid, p in prof.items()}
    assert {"X", "gconfd-2", "galeon-bin"} <= set(by_name)
    galeon = next(pid for pid, n in names.items() if n == "galeon-bin")
    gconfd = next(pid for pid, n in names.items() if n == "gconfd-2")
    assert by_name["gconfd-2"].per_client_cpu_us[galeon] > 0
    assert by_name["galeon-bin"].per_client_cpu_us[gconfd] > 0


def test_batching_overestimates_last_reader():
    run, a, prof = _run(bundled_scenario("batching"))
    names = _names(a)
    (server,) = prof.values()
    truth = run.truth.servers[server.server_pid]
    by_name = {names[c]: us for c, us in server.per_client_cpu_us.items()}
    true_by_name = {names[c]: us for c, us in truth.per_client_cpu_us.items()}
    last = max(by_name, key=by_name.get)
    assert last == "client10"
    assert by_name[last] > 5 * true_by_name[last]
    assert server.total_cpu_us == truth.total_cpu_us
    assert not _same(server, truth)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32))
def test_partition_and_clients_on_random_scenarios(seed):
    run, a, prof = _run(generate_scenario(seed), seed)
    assert set(prof) == detect_servers(a.replay)
    for pid, p in prof.items():
        assert p.total_cpu_us == a.breakdowns[pid].cpu_us
        clients = {c.client_pid for c in a.replay.connections.values() if c.server_pid == pid}
        assert set(+p.per_client_cpu_us) <= clients
        assert _same(p, run.truth.servers[pid])


def test_listener_without_accept_is_not_a_server():
    sc = parse_scenario("process lonely\n  listen as s\n  compute 100\n  exit\n")
    _, a, prof = _run(sc)
    assert prof == {}


def test_report_format():
    _, _, prof = _run(bundled_scenario("clients"))
    lines = render_clients(prof).splitlines()
    assert lines[0].startswith("Server ")
    assert lines[1].startswith("Init ")
    secs = [float(line.split()[1]) for line in lines if line.startswith("Client-")]
    assert secs == sorted(secs, reverse=True)
    doc = json.loads(clients_json(prof))
    assert isinstance(doc["servers"][0]["init_cpu_us"], int)
