"""A workload alternating two 10 ms phases, sampled every 20 ms.

Fixed-period sampling stays locked to the first phase and reports it as the
whole program.  Jittering the period breaks the lock."""

import argparse

from tracekit import SamplingPolicy, bundled_scenario, emit_samples, simulate
from tracekit.profile import function_samples


def share(run, policy):
    counts = function_samples(emit_samples(run, policy), run.symbols)
    n = sum(counts.values())
    return 100 * counts["phase_a"] / n, n


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--half-width", type=int, default=10000)
    args = ap.parse_args()

    run = simulate(bundled_scenario("phases"), args.seed)
    for label, policy in [("fixed 20000", SamplingPolicy.fixed(20000)),
                          (f"jitter 20000+-{args.half_width}",
                           SamplingPolicy.jittered(20000, args.half_width, args.seed))]:
        pct, n = share(run, policy)
        print(f"{label:<22} phase_a {pct:6.2f}% of {n} samples (true 50.00%)")


if __name__ == "__main__":
    main()
