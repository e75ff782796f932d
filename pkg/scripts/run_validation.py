"""Out-of-sample protocol over seeded replicates on the stressed low-load instance.

    python scripts/run_validation.py --out results/validation --replicates 20
"""

import argparse
import csv
import json
from pathlib import Path

import numpy as np

from gridval import harness


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="results/validation")
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--hour", type=int, default=13)
    p.add_argument("--pv", choices=("low", "high"), default="high")
    p.add_argument("--load", choices=("low", "high"), default="low")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    cfg = harness.RunConfig(pv_case=args.pv, load_case=args.load, hours=(args.hour,), eps="true", seed=args.seed)
    setup = harness.load_setup(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in range(args.replicates):
        b = harness.run_out_of_sample(cfg, r, setup)
        b.write(out / f"replicate_{r}")
        s = b.summary()
        rows.append([r, s["objective"]["saa"], s["objective"]["dro"], s["mean_cost_oos"]["saa"],
                     s["mean_cost_oos"]["dro"], s["violation"]["saa"], s["violation"]["dro"]])
        print(json.dumps({"replicate": r, **s}), flush=True)
    with open(out / "replicates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "obj_saa", "obj_dro", "oos_cost_saa", "oos_cost_dro", "viol_saa", "viol_dro"])
        w.writerows(rows)
    a = np.array(rows)
    print(f"DRO objective >= OOS cost in {int((a[:, 2] >= a[:, 4]).sum())}/{len(a)}; "
          f"mean violation SAA {a[:, 5].mean():.3f} DRO {a[:, 6].mean():.3f}")


if __name__ == "__main__":
    main()
