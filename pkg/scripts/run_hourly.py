"""24-hour campaign: one DRO solve per hour with the data-value report.

    python scripts/run_hourly.py --out results/hourly --eps 0.01 [--hours 0-23]
"""

import argparse
from pathlib import Path

from gridval import harness
from gridval.cli import _hours


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results/hourly")
    p.add_argument("--hours", type=_hours, default=tuple(range(24)))
    p.add_argument("--eps", type=float, default=0.01)
    p.add_argument("--pv", choices=("low", "high"), default="high")
    p.add_argument("--load", choices=("low", "high"), default="high")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    cfg = harness.RunConfig(pv_case=args.pv, load_case=args.load, hours=args.hours, eps=args.eps, seed=args.seed)
    rows = harness.run_hours(cfg)  # GRIDVAL_THREADS>1 runs hours in parallel
    harness.write_sweep(rows, Path(args.out))
    for r in rows:
        mu = ", ".join(f"{m:.4g}" for m in r.report.mu) if r.report else r.error
        print(f"hour {r.hour:2d}  {r.status:9s}  objective {r.objective:.4f}  mu [{mu}]")


if __name__ == "__main__":
    main()
