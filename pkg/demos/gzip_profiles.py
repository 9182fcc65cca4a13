"""Flat profile, call graph and line coverage for the gzip fixtures in data/."""

from pathlib import Path

from tracekit.profile import coverage_report, load_coverage, load_profile

DATA = Path(__file__).resolve().parent.parent / "data"


def main():
    prof = load_profile(DATA / "gzip_profile.json")
    print(prof.flat().render())
    print(prof.graph().render())
    print(coverage_report(load_coverage(DATA / "lm_init_coverage.json")))


if __name__ == "__main__":
    main()
