"""Uniform radius sweep for both PV cases, plus a one-provider sweep.

    python scripts/run_sweep.py --out results/sweep [--hour 18] [--vary-cluster 3]
"""

import argparse
import json
from pathlib import Path

from gridval import harness


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results/sweep")
    p.add_argument("--hour", type=int, default=18)
    p.add_argument("--load", choices=("low", "high"), default="high")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vary-cluster", type=int, default=None, help="also sweep one provider with the others at 0.01")
    args = p.parse_args()
    out = Path(args.out)
    summary = {}
    for pv in ("high", "low"):
        cfg = harness.RunConfig(pv_case=pv, load_case=args.load, hours=(args.hour,), seed=args.seed)
        rows = harness.sweep_epsilon(cfg, harness.DEFAULT_EPS_LEVELS)
        harness.write_sweep(rows, out / f"{pv}_pv")
        summary[pv] = {repr(r.level): r.objective for r in rows}
        if args.vary_cluster is not None:
            rows = harness.sweep_epsilon(cfg, harness.DEFAULT_EPS_LEVELS, vary_cluster=args.vary_cluster)
            harness.write_sweep(rows, out / f"{pv}_pv_cluster{args.vary_cluster}")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
