"""Experiment campaigns: out-of-sample validation, radius sweeps, hourly runs."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .case_io import CASE33BW, AssetTable, ConfigurationError, Network, build_network, load_scenario_config, read_case, read_scenario_config, synthetic_case
from .conic import SolverConfig, check_kkt
from .dro_opf import OpfInstance, build_saa, injections, make_instance, realized_cost
from .lindistflow import predict_voltages
from .uncertainty import (
    DEFAULT_CLUSTERS_33,
    ClusterSet,
    FeatureIndex,
    Forecast,
    SampleSet,
    default_support,
    feature_index_map,
    generate_samples,
    load_profiles,
    wasserstein_distance,
    build_forecast,
)
from .valuation import DataValueReport, solve_and_value

DEFAULT_EPS_LEVELS = (1.0, 0.1, 0.01, 0.005, 0.001, 0.0001)


@dataclass(frozen=True)
class RunConfig:
    case: str | None = None  # MATPOWER file; None uses the bundled case33bw
    scenario: str | None = None  # scenario JSON
    pv_case: str = "high"
    load_case: str = "high"
    hours: tuple[int, ...] = (18,)
    eps: object = 0.01  # float, per-cluster list, or "true"
    n_samples: int = 25
    n_full: int = 1000
    n_test: int = 100
    rel_std: float = 0.2
    seed: int = 0
    out: str | None = None
    v0_sq: float = 1.0
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if min(self.n_samples, self.n_full, self.n_test) < 1:
            raise ConfigurationError("sample counts must be positive")
        if self.n_samples > self.n_full:
            raise ConfigurationError("I must not exceed I_full")
        if self.pv_case not in ("low", "high") or self.load_case not in ("low", "high"):
            raise ConfigurationError("pv_case and load_case must be 'low' or 'high'")
        if not self.hours or any(not 0 <= int(h) <= 23 for h in self.hours):
            raise ConfigurationError("hours must lie in 0..23")
        if isinstance(self.eps, str) and self.eps != "true":
            raise ConfigurationError(f"unknown eps specification {self.eps!r}")


@dataclass(frozen=True)
class Setup:
    net: Network
    assets: AssetTable
    clusters: ClusterSet
    index: FeatureIndex
    profiles: dict


def load_setup(cfg: RunConfig) -> Setup:
    net = build_network(read_case(cfg.case or CASE33BW))
    doc = read_scenario_config(cfg.scenario) if cfg.scenario else {}
    doc = dict(doc)
    doc["pv"] = {"case": cfg.pv_case, **(doc.get("pv") or {})}
    assets = load_scenario_config(doc, net)
    if "clusters" in doc:
        clusters = ClusterSet.by_nodes({int(k): v for k, v in doc["clusters"].items()})
    elif cfg.case is None:
        clusters = ClusterSet.by_nodes(DEFAULT_CLUSTERS_33)
    else:
        clusters = ClusterSet.singletons(net)
    clusters.check_partition(net)
    profiles = load_profiles(doc["profiles"]) if "profiles" in doc else load_profiles()
    return Setup(net, assets, clusters, feature_index_map(clusters), profiles)


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def resolve_eps(spec, n_clusters: int) -> np.ndarray:
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return np.full(n_clusters, float(arr))
    if arr.shape != (n_clusters,):
        raise ConfigurationError(f"eps needs 1 or {n_clusters} values, got {arr.size}")
    return arr


def build_instance(setup: Setup, cfg: RunConfig, hour: int, eps=None, samples: SampleSet | None = None) -> OpfInstance:
    """Instance for one hour with ``cfg.n_samples`` seeded samples (or the given ones)."""
    fc = build_forecast(setup.net, setup.assets, hour, cfg.load_case, setup.profiles)
    sup = default_support(fc, setup.assets, setup.index)
    if samples is None:
        samples = generate_samples(fc, setup.index, cfg.rel_std, cfg.n_samples, _seed(cfg.seed, hour), sup)
    eps = cfg.eps if eps is None else eps
    if isinstance(eps, str):
        raise ConfigurationError("eps='true' is only meaningful for the out-of-sample protocol")
    return make_instance(setup.net, setup.assets, setup.index, samples, sup, resolve_eps(eps, len(setup.index.clusters.clusters)), cfg.v0_sq, hour)


def toy_instance(
    parents: Sequence[int] = (1, 2, 3),
    pv_kw: dict | None = None,
    n_samples: int = 10,
    seed: int = 0,
    eps=0.01,
    pv_scale: float = 0.8,
    load_kw=120.0,
    load_kvar=60.0,
    r_ohm=1.5,
    x_ohm=1.0,
    rel_std: float = 0.2,
    der: dict | None = None,
    v_limits=(0.9, 1.1),
    eta_vol: float = 0.05,
    eta_inv: float = 0.05,
    clusters: dict | None = None,
) -> OpfInstance:
    """Small radial feeder with PV, used by tests and the envelope check."""
    net = build_network(synthetic_case(list(parents), r_ohm, x_ohm, load_kw, load_kvar))
    nodes = net.node_order
    pv_kw = {nodes[-1]: 400.0} if pv_kw is None else pv_kw
    doc = {
        "pv": {"ratings_kw": pv_kw},
        "der": der if der is not None else {},
        "voltage_limits": {"v_min": v_limits[0], "v_max": v_limits[1]},
        "risk": {"eta_vol": eta_vol, "eta_inv": eta_inv},
    }
    assets = load_scenario_config(doc, net)
    cs = ClusterSet.by_nodes(clusters) if clusters else ClusterSet.singletons(net)
    cs.check_partition(net)
    index = feature_index_map(cs)
    vals = np.column_stack([[assets.pv_kw.get(n, 0.0) * pv_scale for n in nodes], net.load_kw, net.load_kvar])
    fc = Forecast(nodes, vals)
    sup = default_support(fc, assets, index)
    samples = generate_samples(fc, index, rel_std, n_samples, seed, sup)
    n_cl = len(cs.clusters)
    return make_instance(net, assets, index, samples, sup, resolve_eps(eps, n_cl))


# -- out-of-sample protocol ---------------------------------------------------------------


@dataclass
class ResultBundle:
    hour: int
    seed: int
    eps: np.ndarray
    objective: dict  # method -> in-sample optimal value
    cost_oos: dict  # method -> (I_test,) realised costs
    voltages: dict  # method -> (I_test, N) squared voltages
    violation: dict  # method -> joint violation frequency
    report: DataValueReport | None
    node_order: tuple[int, ...]
    status: dict = field(default_factory=dict)
    kkt: dict = field(default_factory=dict)  # method -> KKT residuals

    def summary(self) -> dict:
        return {
            "hour": self.hour,
            "seed": self.seed,
            "eps": [float(e) for e in self.eps],
            "objective": {k: float(v) for k, v in self.objective.items()},
            "mean_cost_oos": {k: float(np.mean(v)) for k, v in self.cost_oos.items()},
            "violation": {k: float(v) for k, v in self.violation.items()},
            "status": self.status,
            "kkt": self.kkt,
        }

    def write(self, out: str | Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "cost_oos.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "hour", "sample", "cost"])
            for m, costs in self.cost_oos.items():
                for i, c in enumerate(costs):
                    w.writerow([m, self.hour, i, repr(float(c))])
        with open(out / "voltages_oos.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "hour", "sample", "node_id", "v_sq"])
            for m, v in self.voltages.items():
                for i, row in enumerate(v):
                    for node, val in zip(self.node_order, row):
                        w.writerow([m, self.hour, i, node, repr(float(val))])
        with open(out / "voltages_oos_percentiles.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "hour", "node_id", "p0", "p25", "p50", "p75", "p100"])
            for m, v in self.voltages.items():
                q = np.percentile(v, [0, 25, 50, 75, 100], axis=0)
                for j, node in enumerate(self.node_order):
                    w.writerow([m, self.hour, node, *(repr(float(x)) for x in q[:, j])])
        if self.report is not None:
            self.report.write_csv(out / "mu.csv")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def joint_violation(v: np.ndarray, v_min: float, v_max: float, tol: float = 1e-9) -> np.ndarray:
    """True where any of the 2N voltage rows is violated in a test sample."""
    return ((v > v_max + tol) | (v < v_min - tol)).any(axis=-1)


def run_out_of_sample(cfg: RunConfig, replicate: int = 0, setup: Setup | None = None) -> ResultBundle:
    """Draw I_full "true" samples, subsample I, set eps to the exact OT distance, test on I_test."""
    setup = setup or load_setup(cfg)
    hour = int(cfg.hours[0])
    rng = np.random.default_rng(_seed(cfg.seed, replicate, hour, 1))
    fc = build_forecast(setup.net, setup.assets, hour, cfg.load_case, setup.profiles)
    sup = default_support(fc, setup.assets, setup.index)
    full = generate_samples(fc, setup.index, cfg.rel_std, cfg.n_full, _seed(cfg.seed, replicate, hour, 0), sup)
    train = full.subset(rng.choice(cfg.n_full, cfg.n_samples, replace=False))
    test = full.subset(rng.choice(cfg.n_full, cfg.n_test, replace=False))
    k = setup.net.kw_per_pu
    if isinstance(cfg.eps, str):
        eps = np.array([wasserstein_distance(a / k, b / k) for a, b in zip(full.data, train.data)])
    else:
        eps = resolve_eps(cfg.eps, len(setup.index.clusters.clusters))
    inst = build_instance(setup, cfg, hour, eps, samples=train)
    X = test.node_matrix(setup.net.node_order) / k

    objective, costs, volts, viol, status, kkt = {}, {}, {}, {}, {}, {}
    saa = build_saa(inst)
    sol = saa.solve(cfg.solver)
    status["saa"] = sol.status
    built, dsol, report = solve_and_value(inst, cfg.solver)
    status["dro"] = dsol.status
    if not sol.optimal:
        raise RuntimeError(f"SAA solve failed (hour {hour}, replicate {replicate}): {sol.status}")
    for name, bp, s in (("saa", saa, sol), ("dro", built, dsol)):
        dec = bp.layout.decisions(s)
        p, q = injections(dec, X)
        v = predict_voltages(inst.sens, p, q)
        objective[name] = s.objective
        kkt[name] = check_kkt(bp.program, s).as_dict()
        costs[name] = realized_cost(inst, dec, X)
        volts[name] = v
        viol[name] = float(joint_violation(v, setup.assets.v_min, setup.assets.v_max).mean())
    return ResultBundle(hour, cfg.seed, eps, objective, costs, volts, viol, report, setup.net.node_order, status, kkt)


# -- sweeps and campaigns -----------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    hour: int
    level: float
    eps: tuple[float, ...]
    status: str
    objective: float
    report: DataValueReport | None
    error: str = ""


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("GRIDVAL_THREADS", "1")))
    except ValueError:
        raise ConfigurationError("GRIDVAL_THREADS must be an integer") from None


def _sweep_task(args) -> SweepRow:
    cfg, hour, level, eps = args
    setup = load_setup(cfg)
    inst = build_instance(setup, cfg, hour, eps)
    try:
        _, sol, rep = solve_and_value(inst, cfg.solver)
    except (RuntimeError, ValueError) as exc:
        return SweepRow(hour, level, tuple(map(float, eps)), "failed", float("nan"), None, str(exc))
    return SweepRow(hour, level, tuple(map(float, eps)), sol.status, rep.objective, rep)


def _n_clusters(cfg: RunConfig) -> int:
    return len(load_setup(cfg).clusters.clusters)


def sweep_epsilon(
    cfg: RunConfig, levels: Sequence[float] = DEFAULT_EPS_LEVELS, vary_cluster: int | None = None, others: float = 0.01
) -> list[SweepRow]:
    """One DRO solve per (hour, level); uniform radii unless ``vary_cluster`` is set."""
    setup = load_setup(cfg)
    ids = list(setup.index.clusters.ids)
    tasks = []
    for hour in cfg.hours:
        for lv in levels:
            if vary_cluster is None:
                eps = np.full(len(ids), float(lv))
            else:
                eps = np.full(len(ids), float(others))
                eps[ids.index(vary_cluster)] = float(lv)
            tasks.append((cfg, int(hour), float(lv), eps))
    return _run_tasks(_sweep_task, tasks)


def run_hours(cfg: RunConfig) -> list[SweepRow]:
    """Independent solves for every configured hour at the configured radii."""
    n = _n_clusters(cfg)
    eps = resolve_eps(cfg.eps, n)
    return _run_tasks(_sweep_task, [(cfg, int(h), float("nan"), eps) for h in cfg.hours])


def _run_tasks(fn, tasks):
    workers = min(_workers(), len(tasks)) if tasks else 1
    if workers <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))  # map keeps submission order


def write_sweep(rows: Sequence[SweepRow], out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "objective.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "level", "status", "objective", "error"])
        for r in rows:
            w.writerow([r.hour, repr(r.level), r.status, repr(r.objective), r.error])
    with open(out / "mu.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "level", "eps_f", "f", "lambda_co", "lambda_vol", "sum_lambda_inv", "phi_vol", "mu", "degenerate"])
        for r in rows:
            if r.report is None:
                continue
            for k, row in enumerate(r.report.rows()):
                w.writerow([r.hour, repr(r.level), repr(r.eps[k]), row["f"], *(repr(float(row[c])) for c in ("lambda_co", "lambda_vol", "sum_lambda_inv", "phi_vol", "mu")), int(r.report.degenerate)])
    with open(out / "lambda.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["hour", "level", "kind", "f", "node_id", "lambda", "phi"])
        for r in rows:
            rep = r.report
            if rep is None:
                continue
            for k, f in enumerate(rep.cluster_ids):
                w.writerow([r.hour, repr(r.level), "co", f, "", repr(rep.lambda_co[k]), ""])
                w.writerow([r.hour, repr(r.level), "vol", f, "", repr(rep.lambda_vol[k]), repr(rep.phi_vol)])
            for n, f, lam, phi in zip(rep.pv_nodes, rep.pv_clusters, rep.lambda_inv, rep.phi_inv):
                w.writerow([r.hour, repr(r.level), "inv", f, n, repr(lam), repr(phi)])


def config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["hours"] = list(cfg.hours)
    return d


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
