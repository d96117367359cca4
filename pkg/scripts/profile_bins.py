"""Bin patients by excursion percentage and report the mean improvement per bin.

Reads report.json from a finished run and compares two regimes on one region.

    python3 scripts/profile_bins.py runs/reference --candidate fedglu --baseline local_hh --region hypo
"""

import argparse

from fedglu.report import load_report
from fedglu.stats import profile_bins


def improvements(report, candidate, baseline, region):
    """Per-patient relative RMSE reduction (%) pooled over every fold present."""
    out = {}
    for fold, by_pid in report["regimes"][candidate].items():
        for pid, m in by_pid.items():
            a, b = m["rmse"][region], report["regimes"][baseline][fold][pid]["rmse"][region]
            if a is not None and b:
                out.setdefault(pid, []).append(100.0 * (b - a) / b)
    return {pid: sum(v) / len(v) for pid, v in out.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir")
    ap.add_argument("--candidate", default="fedglu")
    ap.add_argument("--baseline", default="local_hh")
    ap.add_argument("--region", choices=("hypo", "hyper"), default="hypo")
    ap.add_argument("--bins", type=int, default=10)
    args = ap.parse_args()
    report = load_report(args.run_dir)
    imp = improvements(report, args.candidate, args.baseline, args.region)
    pct = {pid: report["profiles"][pid][f"{args.region}_pct"] for pid in imp}
    bins = profile_bins(pct, imp, args.region, min(args.bins, len(imp)))
    print(f"{args.candidate} vs {args.baseline}, {args.region} RMSE improvement by {args.region} percentage")
    print(f"{'bin':>3} {'pct range':>15} {'n':>3} {'mean %':>8} {'var':>8}")
    for i, b in enumerate(bins.bins, start=1):
        print(f"{i:>3} {b.lo:>7.2f}-{b.hi:<7.2f} {len(b.patients):>3} {b.mean_improvement:>8.2f} "
              f"{b.var_improvement:>8.2f}")


if __name__ == "__main__":
    main()
