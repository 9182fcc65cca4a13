"""Where did galeon's startup time go?  Simulate the mixed scenario, decode the
trace it wrote and print the per-process wait breakdown next to the
simulator's own record of what happened."""

import argparse

from tracekit import analyze_trace, bundled_scenario, simulate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    run = simulate(bundled_scenario("galeon"), args.seed)
    analysis = analyze_trace(run.trace)
    print(analysis.render())

    print("recovered vs simulator bookkeeping:")
    for pid, truth in sorted(run.truth.breakdowns.items()):
        got = analysis.breakdowns[pid]
        same = got.normalized() == truth.normalized()
        print(f"  {pid:>5} {got.name:<12} elapsed {got.elapsed_us:>8} us  "
              f"cpu {got.cpu_us:>8} us  wait {got.wait_us:>8} us  {'match' if same else 'DIFFER'}")


if __name__ == "__main__":
    main()
