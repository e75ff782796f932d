"""Command-line entry point: ``gridval <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import harness
from .conic import SolverConfig, write_program
from .lindistflow import sensitivity_matrices
from .valuation import DEFAULT_GRID, critical_epsilon, solve_and_value

SUBCOMMANDS = ("solve", "sweep", "validate", "critical-eps", "value-report", "export-matrices")

class UsageError(Exception):
    pass

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        sys.stderr.write(json.dumps({"error": "usage", "message": message}) + "\n")
        self.print_usage(sys.stderr)
        raise SystemExit(2)

def _hours(text: str) -> tuple[int, ...]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    if not out:
        raise argparse.ArgumentTypeError("empty hour list")
    return tuple(out)

def _eps(text: str):
    if text == "true":
        return "true"
    vals = [float(v) for v in text.split(",")]
    return vals[0] if len(vals) == 1 else vals

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--hours", "--hour", dest="hours", type=_hours, default=None, help="e.g. 18, 0-23 or 12,13")
    common.add_argument("--eps", type=_eps, default=None, help="uniform value, comma list per cluster, or 'true'")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--case", default=None, help="MATPOWER case file (default: bundled case33bw)")
    common.add_argument("--scenario", default=None, help="scenario JSON")
    common.add_argument("--pv", choices=("low", "high"), default="high")
    common.add_argument("--load", choices=("low", "high"), default="high")
    common.add_argument("--samples", type=int, default=25, help="I, samples per provider")
    common.add_argument("--rel-std", type=float, default=0.2)
    common.add_argument("--backend", choices=("clarabel", "scs"), default="clarabel")

    p = _Parser(prog="gridval", description="Data-quality valuation for chance-constrained feeder OPF")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    s = sub.add_parser("solve", parents=[common], help="solve the DRO program per hour")
    s.add_argument("--dump-program", default=None, help="write the assembled program as text")
    s = sub.add_parser("sweep", parents=[common], help="radius sweep")
    s.add_argument("--levels", type=_floats, default=harness.DEFAULT_EPS_LEVELS)
    s.add_argument("--vary-cluster", type=int, default=None)
    s.add_argument("--others", type=float, default=0.01)
    s = sub.add_parser("validate", parents=[common], help="out-of-sample protocol")
    s.add_argument("--replicates", type=int, default=1)
    s.add_argument("--full", type=int, default=1000, help="I_full")
    s.add_argument("--test", type=int, default=100, help="I_test")
    s = sub.add_parser("critical-eps", parents=[common], help="critical radius per provider")
    s.add_argument("--cluster", type=int, action="append", default=None)
    s.add_argument("--grid", type=_floats, default=DEFAULT_GRID)
    s.add_argument("--others", type=float, default=0.01)
    s.add_argument("--tol", type=float, default=1e-6)
    sub.add_parser("value-report", parents=[common], help="marginal value of data quality")
    sub.add_parser("export-matrices", parents=[common], help="write R, B, a as CSV")
    return p

def _config(args, **kw) -> harness.RunConfig:
    default_eps = kw.pop("default_eps", 0.01)
    solver = SolverConfig(backend=args.backend) if args.backend != "clarabel" else SolverConfig()
    return harness.RunConfig(
        case=args.case,
        scenario=args.scenario,
        pv_case=args.pv,
        load_case=args.load,
        hours=args.hours or (18,),
        eps=args.eps if args.eps is not None else default_eps,
        n_samples=args.samples,
        rel_std=args.rel_std,
        seed=args.seed,
        out=args.out,
        solver=solver,
        **kw,
    )

def _out(args) -> Path:
    out = Path(args.out or "gridval_out")
    out.mkdir(parents=True, exist_ok=True)
    return out

def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")

def cmd_solve(args) -> dict:
    cfg = _config(args)
    out = _out(args)
    setup = harness.load_setup(cfg)
    rows, solutions = [], {}
    for h in cfg.hours:
        inst = harness.build_instance(setup, cfg, h)
        built, sol, rep = solve_and_value(inst, cfg.solver)
        if args.dump_program:
            write_program(built.program, Path(args.dump_program).with_suffix(f".h{h}.txt"))
        dec = built.layout.decisions(sol)
        kw = setup.net.kw_per_pu
        solutions[str(h)] = {
            "status": sol.status,
            "objective": sol.objective,
            "eps": list(map(float, inst.eps)),
            "decisions": {
                "node_id": list(setup.net.node_order),
                "alpha": dec["alpha"].tolist(),
                "q_c_kvar": (dec["q_c"] * kw).tolist(),
                "p_B_kw": (dec["p_B"] * kw).tolist(),
                "q_B_kvar": (dec["q_B"] * kw).tolist(),
            },
            "report": rep.to_dict(),
        }
        rows.append(harness.SweepRow(h, float("nan"), tuple(map(float, inst.eps)), sol.status, sol.objective, rep))
    harness.write_sweep(rows, out)
    (out / "solution.json").write_text(json.dumps(solutions, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), "objective": {h: v["objective"] for h, v in solutions.items()}}

def cmd_sweep(args) -> dict:
    cfg = _config(args)
    out = _out(args)
    rows = harness.sweep_epsilon(cfg, args.levels, args.vary_cluster, args.others)
    harness.write_sweep(rows, out)
    return {"out": str(out), "rows": [[r.hour, r.level, r.status, r.objective] for r in rows]}

def cmd_validate(args) -> dict:
    if args.replicates < 1:
        raise UsageError("--replicates must be positive")
    cfg = _config(args, default_eps="true", n_full=args.full, n_test=args.test)
    out = _out(args)
    setup = harness.load_setup(cfg)
    summary = []
    for r in range(args.replicates):
        bundle = harness.run_out_of_sample(cfg, r, setup)
        bundle.write(out / f"replicate_{r}")
        summary.append({"replicate": r, **bundle.summary()})
    with open(out / "validate_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "hour", "method", "objective", "mean_cost_oos", "violation"])
        for s in summary:
            for m in ("saa", "dro"):
                w.writerow([s["replicate"], s["hour"], m, repr(s["objective"][m]), repr(s["mean_cost_oos"][m]), repr(s["violation"][m])])
    return {"out": str(out), "replicates": summary}

def cmd_critical(args) -> dict:
    cfg = _config(args)
    out = _out(args)
    setup = harness.load_setup(cfg)
    inst = harness.build_instance(setup, cfg, cfg.hours[0])
    clusters = args.cluster or list(inst.cluster_ids)
    reports = [critical_epsilon(inst, f, args.grid, args.others, args.tol, cfg.solver) for f in clusters]
    with open(out / "critical_eps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["f", "family", "critical_eps", "vanished_at", "tol"])
        for rep in reports:
            for fam, crit in rep.critical.items():
                w.writerow([rep.f, fam, crit, ";".join(repr(g) for g in rep.vanished[fam]), repr(rep.tol)])
    doc = [r.to_dict() for r in reports]
    (out / "critical_eps.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return {"out": str(out), "critical": doc}

def cmd_value(args) -> dict:
    cfg = _config(args)
    out = _out(args)
    setup = harness.load_setup(cfg)
    docs = {}
    for h in cfg.hours:
        _, _, rep = solve_and_value(harness.build_instance(setup, cfg, h), cfg.solver)
        rep.write_csv(out / f"mu_h{h}.csv")
        docs[str(h)] = rep.to_dict()
    (out / "value_report.json").write_text(json.dumps(docs, indent=2, sort_keys=True) + "\n")
    return docs

def cmd_export(args) -> dict:
    cfg = _config(args)
    out = _out(args)
    setup = harness.load_setup(cfg)
    sens = sensitivity_matrices(setup.net, cfg.v0_sq)
    nodes = list(setup.net.node_order)
    for name, M in (("R", sens.R), ("B", sens.B)):
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", *nodes])
            for n, row in zip(nodes, M):
                w.writerow([n, *(repr(float(v)) for v in row)])
    with open(out / "a.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "a"])
        for n, v in zip(nodes, sens.a):
            w.writerow([n, repr(float(v))])
    return {"out": str(out), "n_nodes": len(nodes)}

HANDLERS = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "validate": cmd_validate,
    "critical-eps": cmd_critical,
    "value-report": cmd_value,
    "export-matrices": cmd_export,
}

def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        doc = HANDLERS[args.cmd](args)
    except UsageError as exc:
        sys.stderr.write(json.dumps({"error": "usage", "message": str(exc)}) + "\n")
        return 2
    except Exception as exc:  # reported as JSON, never swallowed silently
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "subcommand": args.cmd}) + "\n")
        return 1
    _emit(doc)
    return 0

if __name__ == "__main__":
    raise SystemExit(main())
