import pytest

from tracekit.scenario import (BUNDLED, Compute, Fork, Poll, ScenarioError, bundled_scenario,
                               parse_scenario)
from tracekit.workloads import generate_scenario, random_scenario_text


def test_minimal_process():
    sc = parse_scenario("process main\n compute 10000\n exit")
    assert len(sc.processes) == 1
    proc = sc.processes[0]
    assert proc.name == "main"
    assert isinstance(proc.actions[0], Compute) and proc.actions[0].duration_us == 10000


def test_resources_and_delay():
    sc = parse_scenario("resources\n  cpus 2\n  quantum 500\n  file_latency default 7\n"
                        "  file_latency /a/b 9\nprocess p delay 40\n  compute 1\n")
    assert sc.resources.cpu_count == 2 and sc.resources.quantum_us == 500
    assert sc.resources.file_latency("/a/b") == 9
    assert sc.resources.file_latency("/other") == 7
    assert sc.processes[0].start_delay_us == 40


def test_poll_and_fork_blocks():
    sc = parse_scenario("process p\n  open /x as f1\n  open /y as f2\n  poll f1 f2 timeout 50000\n"
                        "  fork {\n    statlike 200\n  }\n  waitchild\n")
    acts = sc.processes[0].actions
    assert isinstance(acts[2], Poll) and acts[2].timeout_us == 50000
    assert isinstance(acts[3], Fork) and len(acts[3].actions) == 1


def test_repeat_expands():
    sc = parse_scenario("process p\n  repeat 3 {\n    compute 5\n  }\n")
    assert [a.duration_us for a in sc.processes[0].actions] == [5, 5, 5]


@pytest.mark.parametrize("text, line", [
    ("process p\n  frobnicate 3\n", 2),
    ("process p\n  read nofd 10\n", 2),
    ("process p\n  compute ten\n", 2),
    ("process p\n  exit soon\n", 2),
    ("process p\n  compute 1\n  connect nobody as c\n", 3),
    ("resources\n  cpus 0\nprocess p\n  compute 1\n", 2),
    ("process p\n  fork {\n    compute 1\n", 2),
])
def test_errors_name_the_line(text, line):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    assert info.value.line == line
    assert f"line {line}" in str(info.value)


def test_no_process_is_an_error():
    with pytest.raises(ScenarioError):
        parse_scenario("resources\n  cpus 1\n")


def test_fd_scope_is_per_process():
    with pytest.raises(ScenarioError):
        parse_scenario("process a\n  open /x as f\nprocess b\n  read f 1\n")


@pytest.mark.parametrize("name", BUNDLED)
def test_bundled_scenarios_parse(name):
    assert bundled_scenario(name).processes


def test_galeon_has_four_processes():
    names = [p.name for p in bundled_scenario("galeon").processes]
    assert len(names) == 4
    assert {"X", "gconfd-2", "galeon"} <= set(names)


def test_random_scenarios_are_seeded():
    assert random_scenario_text(5) == random_scenario_text(5)
    assert random_scenario_text(5) != random_scenario_text(6)
    for seed in range(50):
        generate_scenario(seed)
