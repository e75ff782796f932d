"""Marginal value of data quality, critical radii and finite-difference checks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .conic import Solution, SolverConfig, check_kkt
from .dro_opf import BuiltProgram, ConstraintHandles, DecisionLayout, OpfInstance, build_msw_dro

DEFAULT_GRID = (1.0, 0.5, 0.1, 0.05, 0.01, 0.005, 0.001, 0.0001)
FAMILIES = ("vol", "inv", "co")
ABOVE_GRID = "above grid max"
REPORT_COLUMNS = ("f", "lambda_co", "lambda_vol", "sum_lambda_inv", "phi_vol", "mu")


class MissingDualsError(ValueError):
    pass


@dataclass(frozen=True)
class DataValueReport:
    cluster_ids: tuple[int, ...]
    eps: tuple[float, ...]
    lambda_co: tuple[float, ...]
    lambda_vol: tuple[float, ...]
    pv_nodes: tuple[int, ...]
    pv_clusters: tuple[int, ...]
    lambda_inv: tuple[float, ...]
    phi_vol: float
    phi_inv: tuple[float, ...]
    mu: tuple[float, ...]
    objective: float
    degenerate: bool = False
    kkt: dict = field(default_factory=dict)

    def sum_lambda_inv(self, f: int) -> float:
        return float(sum(l for l, g in zip(self.lambda_inv, self.pv_clusters) if g == f))

    def rows(self) -> list[dict]:
        return [
            {
                "f": f,
                "lambda_co": self.lambda_co[k],
                "lambda_vol": self.lambda_vol[k],
                "sum_lambda_inv": self.sum_lambda_inv(f),
                "phi_vol": self.phi_vol,
                "mu": self.mu[k],
            }
            for k, f in enumerate(self.cluster_ids)
        ]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _weakly_active(sol: Solution, prog, name: str, tol: float) -> np.ndarray:
    """Rows with both a vanishing slack and a vanishing multiplier."""
    slack = -prog.row_values(name, sol.x)
    return (np.abs(slack) <= tol) & (np.abs(sol.dual(name)) <= tol)


def marginal_data_value(
    sol: Solution,
    handles: ConstraintHandles,
    layout: DecisionLayout,
    eps=None,
    built: BuiltProgram | None = None,
    degeneracy_tol: float = 1e-7,
) -> DataValueReport:
    """``mu_f = lambda^co_f + phi^vol lambda^vol_f + sum_{PV n in f} phi^inv_n lambda^inv_n``.

    Multipliers follow the conic convention (objective + phi * g for g <= 0 rows),
    so every phi is nonnegative.  Passing ``built`` enables the degeneracy flag.
    """
    if sol.x is None or sol.y is None:
        raise MissingDualsError(f"no multipliers available (status {sol.status})")
    for name in ("lambda_co", "lambda_vol"):
        if name not in layout.var_blocks:
            raise MissingDualsError(f"program has no {name} block; was it built as a DRO program?")
    try:
        phi_vol = float(sol.dual(handles.voltage_budget)[0])
        phi_inv = sol.dual(handles.inverter_budget) if handles.pv_nodes else np.zeros(0)
    except KeyError as exc:
        raise MissingDualsError(f"missing constraint handle {exc}") from None
    ids = layout.cluster_ids
    lam_co = sol.value(layout["lambda_co"])
    lam_vol = sol.value(layout["lambda_vol"])
    lam_inv = sol.value(layout["lambda_inv"]) if handles.pv_nodes else np.zeros(0)
    mu = lam_co + phi_vol * lam_vol
    for k, f in enumerate(handles.pv_clusters):
        mu[ids.index(f)] += phi_inv[k] * lam_inv[k]

    degenerate, kkt = False, {}
    if built is not None:
        rep = check_kkt(built.program, sol)
        kkt = rep.as_dict()
        weak = _weakly_active(sol, built.program, handles.voltage_budget, degeneracy_tol)
        if handles.pv_nodes:
            weak = np.concatenate([weak, _weakly_active(sol, built.program, handles.inverter_budget, degeneracy_tol)])
        degenerate = bool(weak.any() or rep.gap > degeneracy_tol or rep.complementarity > degeneracy_tol)
    eps = np.full(len(ids), math.nan) if eps is None else np.broadcast_to(np.asarray(eps, float), (len(ids),))
    return DataValueReport(
        cluster_ids=tuple(ids),
        eps=tuple(float(e) for e in eps),
        lambda_co=tuple(map(float, lam_co)),
        lambda_vol=tuple(map(float, lam_vol)),
        pv_nodes=tuple(handles.pv_nodes),
        pv_clusters=tuple(handles.pv_clusters),
        lambda_inv=tuple(map(float, lam_inv)),
        phi_vol=phi_vol,
        phi_inv=tuple(map(float, phi_inv)),
        mu=tuple(map(float, mu)),
        objective=float(sol.objective),
        degenerate=degenerate,
        kkt=kkt,
    )


def solve_and_value(inst: OpfInstance, cfg: SolverConfig | None = None, **build_kw):
    """Build the DRO program, solve it and assemble the report."""
    built = build_msw_dro(inst, **build_kw)
    sol = built.solve(cfg)
    if not sol.optimal:
        raise RuntimeError(f"DRO solve failed with status {sol.status}")
    return built, sol, marginal_data_value(sol, built.handles, built.layout, inst.eps, built)


# -- critical radius -------------------------------------------------------------------


@dataclass(frozen=True)
class CriticalEpsReport:
    f: int
    critical: dict  # family -> grid value or ABOVE_GRID
    vanished: dict  # family -> list of grid points where the family's lambdas vanish
    grid: tuple[float, ...]
    others: float
    tol: float
    failures: tuple[tuple[float, str], ...] = ()

    def to_dict(self) -> dict:
        return asdict(self)

    def rows(self) -> list[dict]:
        return [{"f": self.f, "family": fam, "critical_eps": self.critical[fam]} for fam in FAMILIES]


def _family_lambdas(report: DataValueReport, f: int) -> dict[str, np.ndarray]:
    k = report.cluster_ids.index(f)
    inv = [l for l, g in zip(report.lambda_inv, report.pv_clusters) if g == f]
    return {
        "vol": np.array([report.lambda_vol[k]]),
        "inv": np.array(inv),
        "co": np.array([report.lambda_co[k]]),
    }


def critical_epsilon(
    inst: OpfInstance,
    f: int,
    grid=DEFAULT_GRID,
    others: float = 0.01,
    tol: float = 1e-6,
    cfg: SolverConfig | None = None,
    reports: dict | None = None,
) -> CriticalEpsReport:
    """Smallest grid radius for cluster ``f`` at which each family's multipliers vanish.

    Other clusters are held at ``others``.  The tolerance is scaled by the largest
    objective coefficient of the program.  ``reports`` (if given) collects the
    per-level DataValueReport.
    """
    grid = tuple(float(g) for g in grid)
    if list(grid) != sorted(grid, reverse=True):
        raise ValueError("grid must be sorted in descending order")
    ids = list(inst.cluster_ids)
    if f not in ids:
        raise ValueError(f"unknown cluster {f}")
    vanished = {fam: [] for fam in FAMILIES}
    failures = []
    for g in grid:
        eps = np.full(len(ids), others)
        eps[ids.index(f)] = g
        try:
            built, sol, rep = solve_and_value(inst.with_eps(eps), cfg)
        except RuntimeError as exc:
            failures.append((g, str(exc)))
            continue
        if reports is not None:
            reports[g] = rep
        scaled = tol * max(1.0, float(np.abs(built.program.c).max()))
        for fam, lam in _family_lambdas(rep, f).items():
            if np.all(lam <= scaled):
                vanished[fam].append(g)
    critical = {fam: (min(v) if v else ABOVE_GRID) for fam, v in vanished.items()}
    return CriticalEpsReport(f, critical, vanished, grid, others, tol, tuple(failures))


# -- envelope theorem check ------------------------------------------------------------


@dataclass(frozen=True)
class FdCheck:
    f: int
    eps_f: float
    h: float
    mu: float
    central: float
    left: float
    right: float
    rel_gap: float
    kink: bool
    passed: bool


def envelope_fd_check(
    inst: OpfInstance,
    f: int,
    h: float = 1e-3,
    cfg: SolverConfig | None = None,
    rel_tol: float = 0.05,
    abs_tol: float = 1e-3,
) -> FdCheck:
    """Compare ``mu_f`` with the central difference of the optimal value in ``eps_f``.

    A kink is flagged when the one-sided slopes disagree by more than the
    tolerance; the check result is then informative only.
    """
    ids = list(inst.cluster_ids)
    k = ids.index(f)
    e0 = inst.eps[k]
    if e0 - h < 0:
        raise ValueError("eps_f - h must be nonnegative")

    def value(e):
        eps = inst.eps.copy()
        eps[k] = e
        return solve_and_value(inst.with_eps(eps), cfg)

    _, _, rep = value(e0)
    jm = value(e0 - h)[2].objective
    jp = value(e0 + h)[2].objective
    j0 = rep.objective
    central = (jp - jm) / (2 * h)
    left, right = (j0 - jm) / h, (jp - j0) / h
    mu = rep.mu[k]
    gap = abs(mu - central)
    scale = max(abs(central), abs(mu))
    rel = gap / scale if scale > 0 else 0.0
    kink = abs(left - right) > max(rel_tol * max(abs(left), abs(right)), abs_tol)
    passed = gap <= max(rel_tol * abs(central), abs_tol)
    return FdCheck(f, float(e0), float(h), float(mu), float(central), float(left), float(right), float(rel), bool(kink), bool(passed))
