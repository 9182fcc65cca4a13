import json
from pathlib import Path

import pytest

from tracekit import events as ev
from tracekit.cli import main
from tracekit.events import OutState, Timestamp
from tracekit.scenario import bundled_scenario_text
from tracekit.traceformat import ProcessInfo, ProcState, Snapshot, encode_trace, read_trace

ROOT = Path(__file__).resolve().parent.parent
GOLDEN = ROOT / "tests" / "golden"
DATA = ROOT / "data"


@pytest.fixture
def galeon(tmp_path):
    scn = tmp_path / "galeon.scn"
    scn.write_text(bundled_scenario_text("galeon"))
    trace = tmp_path / "galeon.ltr"
    truth = tmp_path / "truth.json"
    assert main(["simulate", str(scn), "--trace", str(trace), "--truth", str(truth),
                 "--seed", "0"]) == 0
    return trace, truth


def test_simulate_matches_golden_trace(galeon):
    trace, truth = galeon
    assert trace.read_bytes() == (GOLDEN / "galeon.ltr").read_bytes()
    assert json.loads(truth.read_text()) == json.loads((GOLDEN / "galeon_truth.json").read_text())


def test_simulate_reports_counts(tmp_path, capsys):
    scn = tmp_path / "one.scn"
    scn.write_text("process main\n  compute 10000\n  exit\n")
    assert main(["simulate", str(scn), "--trace", str(tmp_path / "t")]) == 0
    assert capsys.readouterr().out.startswith("events 3 blocks 1 ")


@pytest.mark.parametrize("command, golden", [
    ("analyze", "galeon_analyze.txt"),
    ("attribute", "galeon_attribute.txt"),
    ("dump", "galeon_dump.txt"),
])
def test_reports_match_golden(galeon, tmp_path, command, golden):
    out = tmp_path / "out.txt"
    assert main([command, str(galeon[0]), "-o", str(out)]) == 0
    assert out.read_bytes() == (GOLDEN / golden).read_bytes()


def test_dump_has_one_line_per_event(galeon, tmp_path, capsys):
    capsys.readouterr()
    assert main(["dump", str(galeon[0])]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == read_trace(galeon[0].read_bytes()).event_count()
    assert all(line.split()[2] != "-" for line in lines)


def test_analyze_json(galeon, capsys):
    capsys.readouterr()
    assert main(["analyze", str(galeon[0]), "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    for p in doc["processes"]:
        parts = p["cpu_user_us"] + sum(p["cpu_syscall_us"].values()) + \
            sum(p["cpu_trap_us"].values()) + p["wait_cpu_us"] + sum(p["wait_file_us"].values()) + \
            sum(p["wait_process_us"].values()) + p["wait_timeout_us"] + p["wait_fork_us"] + \
            sum(p["wait_generic_us"].values())
        assert parts == p["elapsed_us"]


def test_missing_scenario(tmp_path, capsys):
    assert main(["simulate", str(tmp_path / "nope.scn"), "--trace", str(tmp_path / "t")]) == 2
    assert "file not found" in capsys.readouterr().err


def test_missing_trace(tmp_path, capsys):
    assert main(["analyze", str(tmp_path / "nope.ltr")]) == 2
    assert "file not found" in capsys.readouterr().err


def test_bad_scenario(tmp_path, capsys):
    scn = tmp_path / "bad.scn"
    scn.write_text("process p\n  jump 3\n")
    assert main(["simulate", str(scn), "--trace", str(tmp_path / "t")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_deadlock_exit_code(tmp_path, capsys):
    scn = tmp_path / "dl.scn"
    scn.write_text("process p\n  listen as s\n  accept s as c\n")
    assert main(["simulate", str(scn), "--trace", str(tmp_path / "t")]) == 3
    assert "simulation deadlock" in capsys.readouterr().err
    assert not (tmp_path / "t").exists()


def test_truncated_trace(galeon, tmp_path, capsys):
    cut = tmp_path / "cut.ltr"
    cut.write_bytes(galeon[0].read_bytes()[:-40])
    assert main(["analyze", str(cut)]) == 2
    assert "offset" in capsys.readouterr().err


def test_inconsistent_trace_exit_code(tmp_path, capsys):
    snap = Snapshot((ProcessInfo(5, 1, "a", ProcState.RUNNING),), {0: 5}, Timestamp(100, 0))
    bad = encode_trace(snap, {0: [(Timestamp(100, 5), ev.SchedChange(0, 9, OutState.BLOCKED))]})
    path = tmp_path / "bad.ltr"
    path.write_bytes(bad)
    assert main(["analyze", str(path)]) == 3
    assert "100.000005" in capsys.readouterr().err


def test_usage_errors():
    assert main([]) == 2
    assert main(["analyze"]) == 2
    assert main(["frobnicate"]) == 2


def test_profile_and_coverage_commands(capsys):
    capsys.readouterr()
    assert main(["profile-flat", str(DATA / "gzip_profile.json")]) == 0
    flat = capsys.readouterr().out
    assert " 27.13      7.53     7.53     1957     3.85     5.95  fill_window" in flat
    assert main(["profile-graph", str(DATA / "gzip_profile.json")]) == 0
    assert "1957/1958" in capsys.readouterr().out
    assert main(["coverage", str(DATA / "lm_init_coverage.json")]) == 0
    assert "branch 0 taken = 8%" in capsys.readouterr().out
    assert main(["profile-flat", str(DATA / "gzip_profile.json"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["total_samples"] == 2776


def test_simulate_writes_sampled_profile(tmp_path, capsys):
    scn = tmp_path / "p.scn"
    scn.write_text("process p\n  compute 1000000 fn hot\n")
    prof = tmp_path / "prof.json"
    assert main(["simulate", str(scn), "--trace", str(tmp_path / "t"), "--profile-out", str(prof),
                 "--sampling", "fixed:10000"]) == 0
    capsys.readouterr()
    assert main(["profile-flat", str(prof)]) == 0
    assert "100.00      1.00     1.00" in capsys.readouterr().out


def test_bad_sampling_flag(tmp_path):
    scn = tmp_path / "p.scn"
    scn.write_text("process p\n  compute 10\n")
    assert main(["simulate", str(scn), "--trace", str(tmp_path / "t"),
                 "--profile-out", str(tmp_path / "x"), "--sampling", "jitter:5"]) == 2


def test_malformed_profile_json(tmp_path):
    path = tmp_path / "p.json"
    path.write_text("{not json")
    assert main(["profile-flat", str(path)]) == 2
    path.write_text("{}")
    assert main(["profile-graph", str(path)]) == 2
