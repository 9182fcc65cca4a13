"""Charging server CPU time to the clients that caused it.

With one request in flight per client the attribution is exact.  When the
server drains ten queued requests in one go, everything after the last read
lands on the last reader, which is the known weakness of the heuristic."""

import argparse

from tracekit import analyze_trace, attribute_cpu, bundled_scenario, simulate
from tracekit.clients import render_clients


def show(name, seed):
    run = simulate(bundled_scenario(name), seed)
    a = analyze_trace(run.trace)
    names = {pid: st.name for pid, st in a.replay.processes.items()}
    profiles = attribute_cpu(a.replay, a.attributed)
    print(f"== {name}")
    print(render_clients(profiles))
    for pid, prof in profiles.items():
        truth = run.truth.servers[pid]
        print(f"{'client':<10} {'attributed us':>14} {'true us':>10}")
        for c in sorted(set(prof.per_client_cpu_us) | set(truth.per_client_cpu_us)):
            print(f"{names[c]:<10} {prof.per_client_cpu_us[c]:>14} {truth.per_client_cpu_us[c]:>10}")
    print()


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    show("clients", args.seed)
    show("batching", args.seed)


if __name__ == "__main__":
    main()
