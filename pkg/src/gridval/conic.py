"""LP + second-order-cone programs, solver backends and KKT verification.

Row convention.  Every row block stores affine forms ``g(x) = G x + h``:

* ``zero``    rows require ``g(x) = 0``
* ``nonneg``  rows require ``g(x) <= 0`` (the slack ``-g(x)`` is nonnegative)
* ``soc``     rows require ``g(x)`` to lie in a second-order cone, first entry
  bounding the norm of the rest

Multipliers follow the Lagrangian ``c'x + sum_rows y * g(x)`` for zero and
nonneg rows, so a nonneg row has ``y >= 0`` and raising its right-hand side
by ``t`` (i.e. ``g(x) <= t``) lowers the optimum by about ``y * t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

CONES = ("zero", "nonneg", "soc")


@dataclass(frozen=True)
class RowBlock:
    name: str
    start: int
    stop: int
    cone: str
    soc_dims: tuple[int, ...] = ()

    @property
    def size(self) -> int:
        return self.stop - self.start


class RowSet:
    """Accumulator for a block of affine rows, filled with broadcast COO triplets."""

    def __init__(self, n_rows: int):
        self.n = int(n_rows)
        self._r: list[np.ndarray] = []
        self._c: list[np.ndarray] = []
        self._v: list[np.ndarray] = []
        self.const = np.zeros(self.n)

    def add(self, rows, cols, vals=1.0) -> "RowSet":
        rows, cols, vals = np.broadcast_arrays(np.asarray(rows), np.asarray(cols), np.asarray(vals, float))
        self._r.append(rows.ravel().astype(np.int64))
        self._c.append(cols.ravel().astype(np.int64))
        self._v.append(vals.ravel().astype(float))
        return self

    def add_const(self, rows, vals) -> "RowSet":
        np.add.at(self.const, np.asarray(rows), np.asarray(vals, float))
        return self

    def triplets(self):
        if not self._r:
            z = np.zeros(0, dtype=np.int64)
            return z, z, np.zeros(0)
        return np.concatenate(self._r), np.concatenate(self._c), np.concatenate(self._v)


class ProgramBuilder:
    def __init__(self):
        self.n_vars = 0
        self.var_blocks: dict[str, np.ndarray] = {}
        self._lb: list[np.ndarray] = []
        self._ub: list[np.ndarray] = []
        self._obj_c: list[np.ndarray] = []
        self._obj_v: list[np.ndarray] = []
        self.obj_const = 0.0
        self._blocks: list[tuple[str, str, RowSet, tuple[int, ...]]] = []

    def var(self, name: str, shape=(), lb=-np.inf, ub=np.inf) -> np.ndarray:
        if name in self.var_blocks:
            raise ValueError(f"variable block {name!r} already defined")
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        size = int(np.prod(shape)) if shape else 1
        idx = np.arange(self.n_vars, self.n_vars + size).reshape(shape)
        self.n_vars += size
        self._lb.append(np.broadcast_to(np.asarray(lb, float), shape).ravel().copy())
        self._ub.append(np.broadcast_to(np.asarray(ub, float), shape).ravel().copy())
        self.var_blocks[name] = idx
        return idx

    def minimize(self, cols, vals=1.0) -> None:
        cols, vals = np.broadcast_arrays(np.asarray(cols), np.asarray(vals, float))
        self._obj_c.append(cols.ravel())
        self._obj_v.append(vals.ravel())

    def constrain(self, name: str, rows: RowSet, cone: str) -> None:
        if cone not in ("zero", "nonneg"):
            raise ValueError(f"use add_soc for cone {cone!r}")
        self._blocks.append((name, cone, rows, ()))

    def add_soc(self, name: str, rows: RowSet, dims) -> None:
        dims = tuple(int(d) for d in dims)
        if sum(dims) != rows.n:
            raise ValueError("cone dimensions do not cover the row set")
        self._blocks.append((name, "soc", rows, dims))

    def add_rotated_soc(self, name: str, u: RowSet, v: RowSet, w: RowSet, width: int) -> None:
        """Cones ``2 u_k v_k >= ||w_k||^2`` with ``u_k, v_k >= 0``; ``w`` is row-major (K, width)."""
        K = u.n
        if v.n != K or w.n != K * width:
            raise ValueError("rotated cone parts have inconsistent sizes")
        d = 2 + width
        out = RowSet(K * d)
        base = np.arange(K) * d
        for part, sign_first in ((u, 1.0), (v, -1.0)):
            r, c, val = part.triplets()
            out.add(base[r], c, val)
            out.add(base[r] + 1, c, sign_first * val)
            out.add_const(base, part.const)
            out.add_const(base + 1, sign_first * part.const)
        r, c, val = w.triplets()
        k, j = np.divmod(r, width)
        out.add(base[k] + 2 + j, c, math.sqrt(2.0) * val)
        kk, jj = np.divmod(np.arange(K * width), width)
        out.add_const(base[kk] + 2 + jj, math.sqrt(2.0) * w.const)
        self.add_soc(name, out, (d,) * K)

    def build(self) -> "ConicProgram":
        n = self.n_vars
        c = np.zeros(n)
        if self._obj_c:
            np.add.at(c, np.concatenate(self._obj_c).astype(np.int64), np.concatenate(self._obj_v))
        blocks = []
        mats, consts = [], []
        start = 0
        for name, cone, rows, dims in self._blocks:
            r, cc, v = rows.triplets()
            mats.append(sp.csr_matrix((v, (r, cc)), shape=(rows.n, n)))
            consts.append(rows.const)
            blocks.append(RowBlock(name, start, start + rows.n, cone, dims))
            start += rows.n
        G = sp.vstack(mats, format="csr") if mats else sp.csr_matrix((0, n))
        h = np.concatenate(consts) if consts else np.zeros(0)
        names = [b.name for b in blocks]
        if len(set(names)) != len(names):
            raise ValueError("row block names must be unique")
        return ConicProgram(
            n_vars=n,
            c=c,
            c0=self.obj_const,
            G=G,
            h=h,
            blocks=tuple(blocks),
            lb=np.concatenate(self._lb) if self._lb else np.zeros(0),
            ub=np.concatenate(self._ub) if self._ub else np.zeros(0),
            var_blocks=dict(self.var_blocks),
        )


@dataclass(frozen=True)
class StandardForm:
    """``A x + s = b``, ``s`` in the product cone; blocks ordered zero, nonneg, soc."""

    A: sp.csc_matrix
    b: np.ndarray
    c: np.ndarray
    blocks: tuple[RowBlock, ...]


@dataclass(frozen=True)
class ConicProgram:
    n_vars: int
    c: np.ndarray
    c0: float
    G: sp.csr_matrix
    h: np.ndarray
    blocks: tuple[RowBlock, ...]
    lb: np.ndarray
    ub: np.ndarray
    var_blocks: dict[str, np.ndarray] = field(default_factory=dict)

    def block(self, name: str) -> RowBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def row_values(self, name: str, x: np.ndarray) -> np.ndarray:
        b = self.block(name)
        return self.G[b.start:b.stop] @ x + self.h[b.start:b.stop]

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x + self.c0)

    def standard_form(self) -> StandardForm:
        """Row blocks plus variable bounds, mapped to ``A x + s = b``."""
        n = self.n_vars
        eye = sp.identity(n, format="csr")
        fixed = np.flatnonzero(np.isfinite(self.lb) & (self.lb == self.ub))
        lo = np.flatnonzero(np.isfinite(self.lb) & (self.lb != self.ub))
        hi = np.flatnonzero(np.isfinite(self.ub) & (self.lb != self.ub))
        parts = []  # (cone, name, A, b, dims)
        for blk in self.blocks:
            Gb, hb = self.G[blk.start:blk.stop], self.h[blk.start:blk.stop]
            if blk.cone == "soc":
                parts.append((blk.cone, blk.name, -Gb, hb, blk.soc_dims))
            else:
                parts.append((blk.cone, blk.name, Gb, -hb, ()))
        parts.append(("zero", "bound.fixed", eye[fixed], self.lb[fixed], ()))
        parts.append(("nonneg", "bound.lower", -eye[lo], -self.lb[lo], ()))
        parts.append(("nonneg", "bound.upper", eye[hi], self.ub[hi], ()))
        order = {c: k for k, c in enumerate(CONES)}
        parts.sort(key=lambda p: order[p[0]])  # stable
        blocks, start = [], 0
        for cone, name, Ab, bb, dims in parts:
            blocks.append(RowBlock(name, start, start + Ab.shape[0], cone, dims))
            start += Ab.shape[0]
        A = sp.vstack([p[2] for p in parts], format="csc") if parts else sp.csc_matrix((0, n))
        b = np.concatenate([p[3] for p in parts])
        return StandardForm(A, b, self.c.copy(), tuple(blocks))

    @property
    def bound_index(self) -> dict[str, np.ndarray]:
        fixed = np.flatnonzero(np.isfinite(self.lb) & (self.lb == self.ub))
        lo = np.flatnonzero(np.isfinite(self.lb) & (self.lb != self.ub))
        hi = np.flatnonzero(np.isfinite(self.ub) & (self.lb != self.ub))
        return {"bound.fixed": fixed, "bound.lower": lo, "bound.upper": hi}


@dataclass(frozen=True)
class SolverConfig:
    backend: str = "clarabel"
    tol: float = 1e-9  # feasibility, relative
    gap: float = 1e-9  # duality gap, relative
    max_iter: int = 400
    verbose: bool = False


@dataclass(frozen=True)
class Solution:
    status: str  # optimal | infeasible | unbounded | numerical_limit
    x: np.ndarray | None
    y: np.ndarray | None  # multipliers in standard-form row order
    s: np.ndarray | None
    objective: float
    form: StandardForm
    stats: dict

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    def _block(self, name: str) -> RowBlock:
        for b in self.form.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def dual(self, name: str) -> np.ndarray:
        if self.y is None:
            raise ValueError(f"no multipliers available (status {self.status})")
        b = self._block(name)
        return self.y[b.start:b.stop]

    def value(self, idx) -> np.ndarray:
        if self.x is None:
            raise ValueError(f"no primal values available (status {self.status})")
        return self.x[np.asarray(idx)]

    def bound_dual(self, prog: ConicProgram, var: int) -> float:
        """Net multiplier on the bounds of one variable (lower minus upper)."""
        total = 0.0
        for name, sign in (("bound.lower", 1.0), ("bound.fixed", -1.0), ("bound.upper", -1.0)):
            where = np.flatnonzero(prog.bound_index[name] == var)
            if where.size:
                total += sign * float(self.dual(name)[where[0]])
        return total


def _clarabel_cones(form: StandardForm):
    import clarabel

    cones = []
    for blk in form.blocks:
        if blk.size == 0:
            continue
        if blk.cone == "zero":
            cones.append(clarabel.ZeroConeT(blk.size))
        elif blk.cone == "nonneg":
            cones.append(clarabel.NonnegativeConeT(blk.size))
        else:
            cones.extend(clarabel.SecondOrderConeT(d) for d in blk.soc_dims)
    return cones


def _solve_clarabel(form: StandardForm, cfg: SolverConfig):
    import clarabel

    n = form.c.size
    P = sp.csc_matrix((n, n))
    settings = clarabel.DefaultSettings()
    settings.verbose = cfg.verbose
    settings.max_iter = cfg.max_iter
    settings.tol_feas = cfg.tol
    settings.tol_gap_abs = cfg.gap
    settings.tol_gap_rel = cfg.gap
    settings.tol_ktratio = 1e-7
    settings.presolve_enable = False
    solver = clarabel.DefaultSolver(P, form.c, form.A, form.b, _clarabel_cones(form), settings)
    res = solver.solve()
    raw = str(res.status)
    status = {
        "Solved": "optimal",
        "PrimalInfeasible": "infeasible",
        "DualInfeasible": "unbounded",
        "AlmostPrimalInfeasible": "infeasible",
        "AlmostDualInfeasible": "unbounded",
    }.get(raw, "numerical_limit")
    stats = {
        "backend": "clarabel",
        "raw_status": raw,
        "iterations": int(res.iterations),
        "solve_time": float(res.solve_time),
        "r_prim": float(res.r_prim),
        "r_dual": float(res.r_dual),
    }
    return status, np.array(res.x), np.array(res.z), np.array(res.s), stats


def _solve_scs(form: StandardForm, cfg: SolverConfig):
    import scs

    cone = {"z": 0, "l": 0, "q": []}
    for blk in form.blocks:
        if blk.cone == "zero":
            cone["z"] += blk.size
        elif blk.cone == "nonneg":
            cone["l"] += blk.size
        else:
            cone["q"].extend(blk.soc_dims)
    solver = scs.SCS(
        {"A": form.A, "b": form.b, "c": form.c},
        cone,
        eps_abs=cfg.tol,
        eps_rel=cfg.tol,
        max_iters=max(cfg.max_iter, 100_000),
        verbose=cfg.verbose,
    )
    res = solver.solve()
    info = res["info"]
    raw = info["status"]
    status = {"solved": "optimal", "infeasible": "infeasible", "unbounded": "unbounded"}.get(raw, "numerical_limit")
    stats = {"backend": "scs", "raw_status": raw, "iterations": int(info["iter"]),
             "solve_time": float(info["solve_time"]) / 1e3}
    return status, res["x"], res["y"], res["s"], stats


BACKENDS = {"clarabel": _solve_clarabel, "scs": _solve_scs}


def solve(prog: ConicProgram, cfg: SolverConfig | None = None) -> Solution:
    cfg = cfg or SolverConfig()
    if cfg.backend not in BACKENDS:
        raise ValueError(f"unknown backend {cfg.backend!r}; available {sorted(BACKENDS)}")
    form = prog.standard_form()
    status, x, y, s, stats = BACKENDS[cfg.backend](form, cfg)
    if status == "optimal":
        return Solution(status, x, y, s, prog.objective(x), form, stats)
    if status == "numerical_limit" and x is not None:
        return Solution(status, x, y, s, prog.objective(x), form, stats)
    return Solution(status, None, None, None, math.nan, form, stats)


# -- KKT verification --------------------------------------------------------


@dataclass(frozen=True)
class KKTReport:
    primal_residual: float
    dual_residual: float
    primal_cone: float
    dual_cone: float
    complementarity: float
    gap: float
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.as_dict().values()) <= self.tol

    def as_dict(self) -> dict[str, float]:
        return {
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "primal_cone": self.primal_cone,
            "dual_cone": self.dual_cone,
            "complementarity": self.complementarity,
            "gap": self.gap,
        }


def _cone_violation(v: np.ndarray, blocks, dual: bool) -> float:
    worst = 0.0
    for blk in blocks:
        seg = v[blk.start:blk.stop]
        if seg.size == 0:
            continue
        if blk.cone == "zero":
            if not dual:
                worst = max(worst, float(np.abs(seg).max()))
        elif blk.cone == "nonneg":
            worst = max(worst, float(max(0.0, -seg.min())))
        else:
            off = 0
            for d in blk.soc_dims:
                cone = seg[off:off + d]
                worst = max(worst, float(np.linalg.norm(cone[1:]) - cone[0]))
                off += d
    return worst


def check_kkt(prog: ConicProgram, sol: Solution, tol: float = 1e-6) -> KKTReport:
    """Residuals of the conic KKT system, each scaled to be dimensionless.

    Uses the primal point, the slacks and the multipliers stored in ``sol``,
    rebuilt against the program's own standard form (not the backend's).
    """
    if sol.x is None or sol.y is None:
        raise ValueError(f"solution has no certificates (status {sol.status})")
    form = prog.standard_form()
    A, b, c = form.A, form.b, form.c
    x, y, s = sol.x, sol.y, sol.s
    Ax = A @ x
    bnorm = 1.0 + max(float(np.abs(b).max(initial=0.0)), float(np.abs(Ax).max(initial=0.0)))
    cnorm = 1.0 + float(np.abs(c).max(initial=0.0))
    pobj, dobj = float(c @ x), float(-b @ y)
    scale = 1.0 + abs(pobj) + abs(dobj)
    return KKTReport(
        primal_residual=float(np.abs(Ax + s - b).max(initial=0.0)) / bnorm,
        dual_residual=float(np.abs(c + A.T @ y).max(initial=0.0)) / cnorm,
        primal_cone=_cone_violation(s, form.blocks, dual=False) / bnorm,
        dual_cone=_cone_violation(y, form.blocks, dual=True) / cnorm,
        complementarity=abs(float(s @ y)) / scale,
        gap=abs(pobj - dobj) / scale,
        tol=tol,
    )


def write_program(prog: ConicProgram, path: str | Path) -> None:
    """Plain-text dump: ``var``, ``obj``, ``block`` and ``a``/``h`` coefficient lines."""
    G = prog.G.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# conic program: {prog.n_vars} variables, {prog.G.shape[0]} rows\n")
        fh.write(f"objective_constant {prog.c0!r}\n")
        for i in range(prog.n_vars):
            fh.write(f"var {i} {prog.lb[i]!r} {prog.ub[i]!r}\n")
        for i in np.flatnonzero(prog.c):
            fh.write(f"obj {i} {prog.c[i]!r}\n")
        for blk in prog.blocks:
            dims = " ".join(map(str, blk.soc_dims))
            fh.write(f"block {blk.name} {blk.cone} {blk.start} {blk.stop} {dims}".rstrip() + "\n")
        for r, cc, v in zip(G.row, G.col, G.data):
            fh.write(f"a {r} {cc} {v!r}\n")
        for r in np.flatnonzero(prog.h):
            fh.write(f"h {r} {prog.h[r]!r}\n")
