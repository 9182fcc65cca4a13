"""tracekit command line: simulate a scenario into a trace, then analyze it.

Exit status is 0 on success, 2 for unreadable or malformed input and usage
errors, 3 when the input is well formed but the run cannot complete
(simulation deadlock, inconsistent trace).
"""

from __future__ import annotations

import argparse
import json
import sys

from .clients import attribute_cpu, clients_json, render_clients
from .profile import ArcTable, ProfileData, ProfileError, coverage_report, load_coverage, load_profile
from .replay import TraceInconsistency, attribute_pids
from .scenario import ScenarioError, load_scenario
from .simulator import SamplingPolicy, SimulationDeadlock, emit_samples, simulate
from .traceformat import DEFAULT_BLOCK_CAPACITY, TraceDecodeError, dump_trace, read_trace
from .waits import analyze_trace, render_json

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DOMAIN = 3


class _InputError(Exception):
    pass


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise _InputError(f"{path}: file not found") from None
    except OSError as exc:
        raise _InputError(f"{path}: {exc.strerror}") from None


def _write(path, text: str):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _load_trace(path):
    return read_trace(_read_bytes(path))


def cmd_simulate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except FileNotFoundError:
        raise _InputError(f"{args.scenario}: file not found") from None
    run = simulate(scenario, args.seed, args.block_capacity)
    data = run.trace.to_bytes()
    with open(args.trace, "wb") as fh:
        fh.write(data)
    if args.truth:
        _write(args.truth, json.dumps(run.truth.to_json(), indent=2, sort_keys=True) + "\n")
    if args.profile_out:
        policy = SamplingPolicy.parse(args.sampling, args.seed)
        hist = emit_samples(run, policy)
        arcs = ArcTable()
        for (caller, callee), n in run.arcs.items():
            arcs.record(caller, callee, n)
        prof = ProfileData(hist, run.symbols, arcs)
        _write(args.profile_out, json.dumps(prof.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"events {run.trace.event_count()} blocks {len(run.trace.blocks)} bytes {len(data)}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    analysis = analyze_trace(_load_trace(args.trace))
    if args.format == "json":
        text = render_json(analysis.breakdowns, analysis.replay)
    else:
        text = analysis.render()
    _write(args.output, text)
    return EXIT_OK


def cmd_attribute(args) -> int:
    analysis = analyze_trace(_load_trace(args.trace))
    profiles = attribute_cpu(analysis.replay, analysis.attributed)
    text = clients_json(profiles) if args.format == "json" else render_clients(profiles)
    _write(args.output, text)
    return EXIT_OK


def cmd_dump(args) -> int:
    trace = _load_trace(args.trace)
    attributed = attribute_pids(trace.snapshot, trace.per_cpu_events())
    pids = {i: ae.pid for i, ae in enumerate(attributed) if ae.pid is not None}
    _write(args.output, dump_trace(trace, pids))
    return EXIT_OK


def _profile(args) -> ProfileData:
    try:
        return load_profile(args.profile)
    except FileNotFoundError:
        raise _InputError(f"{args.profile}: file not found") from None


def cmd_profile_flat(args) -> int:
    flat = _profile(args).flat()
    if args.format == "json":
        _write(args.output, json.dumps(flat.to_json(), indent=2, sort_keys=True) + "\n")
    else:
        _write(args.output, flat.render())
    return EXIT_OK


def cmd_profile_graph(args) -> int:
    graph = _profile(args).graph()
    if args.format == "json":
        _write(args.output, json.dumps(graph.to_json(), indent=2, sort_keys=True) + "\n")
    else:
        _write(args.output, graph.render())
    return EXIT_OK


def cmd_coverage(args) -> int:
    try:
        counts = load_coverage(args.counts)
    except FileNotFoundError:
        raise _InputError(f"{args.counts}: file not found") from None
    if args.format == "json":
        _write(args.output, json.dumps(counts.to_json(), indent=2, sort_keys=True) + "\n")
    else:
        _write(args.output, coverage_report(counts))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def fmt(p):
        p.add_argument("--format", choices=("text", "json"), default="text")
        p.add_argument("-o", "--output", help="report path (default: stdout)")

    p = sub.add_parser("simulate", help="run a scenario, write a trace and its ground truth")
    p.add_argument("scenario")
    p.add_argument("--trace", required=True, help="output trace file")
    p.add_argument("--truth", help="output ground-truth JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--block-capacity", type=int, default=DEFAULT_BLOCK_CAPACITY)
    p.add_argument("--sampling", default="fixed:10000",
                   help="fixed:<us> or jitter:<mean>:<halfwidth> (with --profile-out)")
    p.add_argument("--profile-out", help="write sampled profile data JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="per-process CPU and wait decomposition")
    p.add_argument("trace")
    fmt(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("attribute", help="server CPU time split by client")
    p.add_argument("trace")
    fmt(p)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("dump", help="print every event with its pid")
    p.add_argument("trace")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("profile-flat", help="flat profile from profile data JSON")
    p.add_argument("profile")
    fmt(p)
    p.set_defaults(func=cmd_profile_flat)

    p = sub.add_parser("profile-graph", help="call graph from profile data JSON")
    p.add_argument("profile")
    fmt(p)
    p.set_defaults(func=cmd_profile_graph)

    p = sub.add_parser("coverage", help="line and branch coverage report")
    p.add_argument("counts")
    fmt(p)
    p.set_defaults(func=cmd_coverage)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        if getattr(args, "block_capacity", 1) < 1:
            raise _InputError("--block-capacity must be positive")
        return args.func(args)
    except (_InputError, ScenarioError, TraceDecodeError, ProfileError) as exc:
        print(f"tracekit: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (SimulationDeadlock, TraceInconsistency) as exc:
        print(f"tracekit: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ValueError as exc:
        # bad --sampling text and malformed JSON inputs
        print(f"tracekit: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"tracekit: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
