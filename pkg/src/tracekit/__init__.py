"""Kernel-style event traces: a compact binary format, a workload simulator
with known ground truth, and analyzers for wait time, per-client server time
and sampled profiles."""

from .accounting import ServerProfile, WaitBreakdown, WaitCategory
from .events import Timestamp, WaitSource, SourceKind
from .replay import TraceInconsistency, attribute_pids, replay, replay_trace
from .scenario import Scenario, ScenarioError, bundled_scenario, load_scenario, parse_scenario
from .simulator import (GroundTruth, SamplingPolicy, SimulationDeadlock, emit_samples,
                        run_simulation, simulate)
from .traceformat import (TraceDecodeError, TraceFile, decode_trace, dump_trace,
                          encode_trace, read_trace)
from .waits import analyze_trace, classify_block, decompose, render_report
from .clients import attribute_cpu, detect_servers, render_clients

__version__ = "0.1.0"
