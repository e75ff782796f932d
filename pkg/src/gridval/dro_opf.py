"""Sample-average and multi-source Wasserstein DRO programs for the feeder OPF.

All quantities inside the programs are per-unit on the network MVA base:
decisions, samples, support bounds and the Wasserstein radii alike.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .case_io import AssetTable, Network
from .conic import ConicProgram, ProgramBuilder, RowSet, Solution, SolverConfig, solve
from .lindistflow import VoltageSensitivity, sensitivity_matrices
from .uncertainty import FeatureIndex, SampleSet, SupportBox


class AssumptionViolation(ValueError):
    """Cluster datasets are not index-aligned (unequal sample counts)."""


class SupportInconsistency(ValueError):
    pass


class ModelBuildError(ValueError):
    pass


@dataclass(frozen=True)
class OpfInstance:
    net: Network
    sens: VoltageSensitivity
    assets: AssetTable
    index: FeatureIndex
    samples: SampleSet  # p.u.
    support: SupportBox  # p.u.
    eps: np.ndarray  # per cluster, aligned with index.clusters.clusters
    hour: int | None = None

    def __post_init__(self):
        eps = np.asarray(self.eps, dtype=float)
        if eps.shape != (len(self.index.clusters.clusters),):
            raise ValueError("need one radius per cluster")
        if not np.all(np.isfinite(eps)) or np.any(eps < 0):
            raise ValueError("radii must be finite and nonnegative")
        object.__setattr__(self, "eps", eps)

    @property
    def n(self) -> int:
        return self.net.n_nodes

    @property
    def cluster_ids(self) -> tuple[int, ...]:
        return self.index.clusters.ids

    @property
    def pv_nodes(self) -> list[int]:
        return self.assets.pv_nodes(self.net)

    def with_eps(self, eps) -> "OpfInstance":
        eps = np.broadcast_to(np.asarray(eps, float), (len(self.cluster_ids),)).copy()
        return OpfInstance(self.net, self.sens, self.assets, self.index, self.samples, self.support, eps, self.hour)

    def with_samples(self, samples: SampleSet) -> "OpfInstance":
        return OpfInstance(self.net, self.sens, self.assets, self.index, samples, self.support, self.eps, self.hour)

    def per_unit_params(self) -> dict[str, np.ndarray]:
        p = self.assets.arrays(self.net)
        k = self.net.kw_per_pu
        for key in ("S", "p_B_min", "p_B_max", "q_B_min", "q_B_max"):
            p[key] = p[key] / k
        return p


def make_instance(
    net: Network,
    assets: AssetTable,
    index: FeatureIndex,
    samples_kw: SampleSet,
    support_kw: SupportBox,
    eps,
    v0_sq: float = 1.0,
    hour: int | None = None,
) -> OpfInstance:
    """Scale kW samples and support to per-unit and bundle an instance."""
    to_pu = 1.0 / net.kw_per_pu
    eps = np.broadcast_to(np.asarray(eps, float), (len(index.clusters.clusters),)).copy()
    return OpfInstance(
        net,
        sensitivity_matrices(net, v0_sq),
        assets,
        index,
        samples_kw.scaled(to_pu),
        support_kw.scaled(to_pu),
        eps,
        hour,
    )


# -- voltage halfspaces ----------------------------------------------------------


@dataclass(frozen=True)
class VoltageHalfspaces:
    """Rows ``<a_k, delta> + c_k <= 0`` for k = 1..2N (upper limits first).

    ``a_k`` over the cluster-ordered delta is ``coef_const + coef_alpha * alpha[alpha_node]``;
    ``c_k`` is ``offset_const + offset_pB @ p_B + offset_qc @ q_c + offset_qB @ q_B``.
    """

    coef_const: np.ndarray  # (K, D)
    coef_alpha: np.ndarray  # (K, D)
    alpha_node: np.ndarray  # (D,) node position of the p_av column, -1 elsewhere
    offset_const: np.ndarray  # (K,)
    offset_pB: np.ndarray  # (K, N)
    offset_qc: np.ndarray  # (K, N)
    offset_qB: np.ndarray  # (K, N)
    cluster_slices: tuple[slice, ...]

    @property
    def K(self) -> int:
        return self.coef_const.shape[0]

    def evaluate(self, alpha, q_c, p_B, q_B) -> tuple[np.ndarray, np.ndarray]:
        alpha = np.asarray(alpha, float)
        a_alpha = np.where(self.alpha_node >= 0, alpha[np.maximum(self.alpha_node, 0)], 0.0)
        A = self.coef_const + self.coef_alpha * a_alpha
        c = self.offset_const + self.offset_pB @ p_B + self.offset_qc @ q_c + self.offset_qB @ q_B
        return A, c

    def losses(self, decisions: dict, delta: np.ndarray) -> np.ndarray:
        """``max_k <a_k, delta_i> + c_k`` for rows of cluster-ordered ``delta``."""
        A, c = self.evaluate(decisions["alpha"], decisions["q_c"], decisions["p_B"], decisions["q_B"])
        return (np.atleast_2d(delta) @ A.T + c).max(axis=1)


def assemble_voltage_halfspaces(inst: OpfInstance) -> VoltageHalfspaces:
    R, B, a = inst.sens.R, inst.sens.B, inst.sens.a
    N = inst.n
    pos = {b: k for k, b in enumerate(inst.net.node_order)}
    cols, slices, start = [], [], 0
    for f, items in inst.index.clusters.clusters:
        cols.extend(items)
        slices.append(slice(start, start + len(items)))
        start += len(items)
    D = len(cols)
    base = np.zeros((N, D))
    alpha_c = np.zeros((N, D))
    alpha_node = np.full(D, -1)
    for m, (node, ft) in enumerate(cols):
        j = pos[node]
        if ft == "p_av":
            base[:, m] = R[:, j]
            alpha_c[:, m] = -R[:, j]
            alpha_node[m] = j
        elif ft == "p_l":
            base[:, m] = -R[:, j]
        else:
            base[:, m] = -B[:, j]
    sgn = np.concatenate([np.ones(N), -np.ones(N)])[:, None]
    A0 = np.vstack([base, -base])
    Aa = np.vstack([alpha_c, -alpha_c])
    # w = R p_B + B (q_c + q_B) + a, matching g_rho
    off = np.concatenate([a - inst.assets.v_max, -a + inst.assets.v_min])
    return VoltageHalfspaces(
        A0, Aa, alpha_node, off,
        sgn * np.vstack([R, R]), sgn * np.vstack([B, B]), sgn * np.vstack([B, B]),
        tuple(slices),
    )


# -- layout --------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionLayout:
    var_blocks: dict[str, object]
    cluster_ids: tuple[int, ...]
    pv_nodes: tuple[int, ...]
    node_order: tuple[int, ...]
    K: int

    def __getitem__(self, name):
        return self.var_blocks[name]

    def decisions(self, sol: Solution) -> dict[str, np.ndarray]:
        return {k: sol.value(self.var_blocks[k]) for k in ("alpha", "q_c", "p_B", "q_B")}


@dataclass(frozen=True)
class ConstraintHandles:
    voltage_budget: str = "vol.budget"  # one row
    inverter_budget: str = "inv.budget"  # one row per PV node, in layout.pv_nodes order
    pv_nodes: tuple[int, ...] = ()
    pv_clusters: tuple[int, ...] = ()  # f(n): cluster holding each PV node's p_av


@dataclass
class BuiltProgram:
    program: ConicProgram
    layout: DecisionLayout
    handles: ConstraintHandles
    halfspaces: VoltageHalfspaces
    kind: str
    extras: dict = field(default_factory=dict)

    def solve(self, cfg: SolverConfig | None = None) -> Solution:
        return solve(self.program, cfg)


def _check_instance(inst: OpfInstance) -> None:
    if not inst.samples.aligned:
        counts = sorted({d.shape[0] for d in inst.samples.data})
        raise AssumptionViolation(f"clusters supply different sample counts {counts}")
    if inst.samples.n_samples < 1:
        raise ModelBuildError("need at least one sample")
    p = inst.per_unit_params()
    if np.any(p["p_B_min"] > p["p_B_max"]) or np.any(p["q_B_min"] > p["q_B_max"]):
        raise ModelBuildError("infeasible DER bounds")
    for (f, items), d, lo, hi in zip(inst.index.clusters.clusters, inst.samples.data, inst.support.lower, inst.support.upper):
        tol = 1e-9 * (1.0 + np.abs(hi))
        if np.any(d < lo - tol) or np.any(d > hi + tol):
            raise SupportInconsistency(f"cluster {f} has samples outside its support")
        for m, (node, ft) in enumerate(items):
            if ft == "p_av" and inst.assets.pv_kw.get(node, 0.0) == 0 and np.any(d[:, m] > 0):
                raise SupportInconsistency(f"node {node} has no PV rating but positive p_av samples")


def _decision_vars(b: ProgramBuilder, inst: OpfInstance, fixed: dict | None = None):
    N = inst.n
    p = inst.per_unit_params()
    has_pv = p["S"] > 0
    alpha_ub = np.where(has_pv, 1.0, 0.0)
    qc_lim = np.where(has_pv, np.inf, 0.0)
    bounds = {
        "alpha": (np.zeros(N), alpha_ub),
        "q_c": (-qc_lim, qc_lim),
        "p_B": (p["p_B_min"], p["p_B_max"]),
        "q_B": (p["q_B_min"], p["q_B_max"]),
    }
    out = {}
    for name, (lo, hi) in bounds.items():
        if fixed is not None:
            v = np.asarray(fixed[name], float)
            lo, hi = v, v
        out[name] = b.var(name, N, lb=lo, ub=hi)
    return out, p


def _abs_epigraph(b: ProgramBuilder, dv: dict, p: dict, N: int) -> None:
    """|q_c| and |q_B| epigraphs charged at e_n."""
    for name in ("q_c", "q_B"):
        t = b.var(f"abs_{name}", N, lb=0.0)
        rows = RowSet(2 * N)
        r = np.arange(N)
        rows.add(r, dv[name], 1.0).add(r, t, -1.0)
        rows.add(N + r, dv[name], -1.0).add(N + r, t, -1.0)
        b.constrain(f"abs.{name}", rows, "nonneg")
        b.minimize(t, p["e"])


def _node_feature_data(inst: OpfInstance):
    """Per node: (cluster slot, column) of p_l and p_av plus sample/support values."""
    ids = list(inst.cluster_ids)
    out = []
    for node in inst.net.node_order:
        fl, ml = inst.index.locate(node, "p_l")
        fa, ma = inst.index.locate(node, "p_av")
        kl, ka = ids.index(fl), ids.index(fa)
        out.append(
            dict(
                kl=kl, ka=ka,
                L_hat=inst.samples.data[kl][:, ml], L_lo=inst.support.lower[kl][ml], L_hi=inst.support.upper[kl][ml],
                A_hat=inst.samples.data[ka][:, ma], A_lo=inst.support.lower[ka][ma], A_hi=inst.support.upper[ka][ma],
            )
        )
    return out


def _cluster_matrix(inst: OpfInstance, getter) -> np.ndarray:
    return np.concatenate([getter(k) for k in range(len(inst.cluster_ids))], axis=-1)


def _sample_matrix(inst: OpfInstance) -> np.ndarray:
    """(I, D) cluster-ordered samples."""
    return np.concatenate(inst.samples.data, axis=1)


def _pv_cones(b: ProgramBuilder, dv: dict, pv_pos: np.ndarray):
    """t_alpha >= (1 - alpha)^2 and t_qc >= q_c^2 on PV nodes (rotated cones)."""
    P = pv_pos.size
    t_alpha = b.var("t_alpha", P, lb=0.0)
    t_qc = b.var("t_qc", P, lb=0.0)
    k = np.arange(P)
    u = RowSet(P).add(k, t_alpha, 1.0)
    v = RowSet(P).add_const(k, np.full(P, 0.5))
    w = RowSet(P).add(k, dv["alpha"][pv_pos], -1.0).add_const(k, np.ones(P))
    b.add_rotated_soc("cone.alpha", u, v, w, 1)
    u = RowSet(P).add(k, t_qc, 1.0)
    v = RowSet(P).add_const(k, np.full(P, 0.5))
    w = RowSet(P).add(k, dv["q_c"][pv_pos], 1.0)
    b.add_rotated_soc("cone.qc", u, v, w, 1)
    return t_alpha, t_qc


def _halfspace_offset_rows(rows: RowSet, row_ids, hs: VoltageHalfspaces, dv: dict, k_idx) -> None:
    """Add ``c_k`` (affine in p_B, q_c, q_B) to ``rows[row_ids]`` for halfspace indices ``k_idx``."""
    row_ids = np.asarray(row_ids)
    k_idx = np.asarray(k_idx)
    N = hs.offset_pB.shape[1]
    for name, M in (("p_B", hs.offset_pB), ("q_c", hs.offset_qc), ("q_B", hs.offset_qB)):
        rows.add(row_ids[:, None], dv[name][None, :], M[k_idx])
    rows.add_const(row_ids, hs.offset_const[k_idx])
    del N


# -- SAA -----------------------------------------------------------------------------


def build_saa(inst: OpfInstance, fixed: dict | None = None) -> BuiltProgram:
    """Sample-average objective with CVaR voltage and inverter constraints."""
    _check_instance(inst)
    b = ProgramBuilder()
    N, I = inst.n, inst.samples.n_samples
    dv, p = _decision_vars(b, inst, fixed)
    _abs_epigraph(b, dv, p, N)
    nd = _node_feature_data(inst)
    hs = assemble_voltage_halfspaces(inst)

    # objective: (1/I) sum_i sum_n c[y]^+ + d[-y]^+ + h alpha p_av
    s1 = b.var("s_co1", (N, I), lb=0.0)
    b.minimize(s1, 1.0 / I)
    rows = RowSet(2 * N * I)
    for n, d in enumerate(nd):
        r = n * I + np.arange(I)
        # c (p_l - p_B - (1-alpha) p_av) - s <= 0
        rows.add(r, dv["alpha"][n], p["c"][n] * d["A_hat"]).add(r, dv["p_B"][n], -p["c"][n]).add(r, s1[n], -1.0)
        rows.add_const(r, p["c"][n] * (d["L_hat"] - d["A_hat"]))
        r2 = N * I + r
        rows.add(r2, dv["alpha"][n], -p["d"][n] * d["A_hat"]).add(r2, dv["p_B"][n], p["d"][n]).add(r2, s1[n], -1.0)
        rows.add_const(r2, p["d"][n] * (d["A_hat"] - d["L_hat"]))
        b.minimize(dv["alpha"][n], p["h"][n] * d["A_hat"].mean())
    b.constrain("co.saa", rows, "nonneg")

    _saa_voltage_block(b, inst, dv, hs)
    pv_nodes = _saa_inverter_block(b, inst, dv, p, nd)
    layout = DecisionLayout(dict(b.var_blocks), inst.cluster_ids, tuple(pv_nodes), inst.net.node_order, hs.K)
    return BuiltProgram(b.build(), layout, _handles(inst, pv_nodes), hs, "saa")


def _saa_voltage_block(b: ProgramBuilder, inst: OpfInstance, dv: dict, hs: VoltageHalfspaces) -> None:
    I, K = inst.samples.n_samples, hs.K
    eta = inst.assets.eta_vol
    X = _sample_matrix(inst)  # (I, D)
    varpi = b.var("varpi_vol")
    varphi = b.var("varphi_vol")
    t = b.var("s_vol", I, lb=0.0)
    rows = RowSet(K * I)
    r = np.arange(K * I).reshape(K, I)
    # <a_k, delta_i> = X_i . coef_const_k + sum_{p_av cols} coef_alpha_k * delta_i * alpha
    rows.add_const(r, hs.coef_const @ X.T)
    cols = np.flatnonzero(hs.alpha_node >= 0)
    for m in cols:
        rows.add(r, dv["alpha"][hs.alpha_node[m]], hs.coef_alpha[:, m][:, None] * X[:, m][None, :])
    _halfspace_offset_rows(rows, r.ravel(), hs, dv, np.repeat(np.arange(K), I))
    rows.add(r, varphi, -1.0).add(r, t[None, :], -1.0)
    b.constrain("vol.epi", rows, "nonneg")
    budget = RowSet(1).add(0, t, 1.0 / I).add(0, varpi, -eta)
    b.constrain("vol.budget", budget, "nonneg")
    _cvar_link(b, "vol", varpi, varphi)


def _cvar_link(b: ProgramBuilder, tag: str, varpi, varphi) -> None:
    varpi, varphi = np.atleast_1d(varpi), np.atleast_1d(varphi)
    k = np.arange(varpi.size)
    b.constrain(f"{tag}.link", RowSet(k.size).add(k, varpi, 1.0).add(k, varphi, 1.0), "nonneg")
    b.constrain(f"{tag}.sign", RowSet(k.size).add(k, varphi, 1.0), "nonneg")


def _saa_inverter_block(b, inst, dv, p, nd) -> list[int]:
    pv_nodes = inst.pv_nodes
    pos = np.array([inst.net.index(n) for n in pv_nodes], dtype=int)
    P, I = pos.size, inst.samples.n_samples
    if P == 0:
        return []
    t_alpha, t_qc = _pv_cones(b, dv, pos)
    varpi = b.var("varpi_inv", P)
    varphi = b.var("varphi_inv", P)
    s = b.var("s_inv", (P, I), lb=0.0)
    rows = RowSet(P * I)
    for k, j in enumerate(pos):
        r = k * I + np.arange(I)
        A_hat = nd[j]["A_hat"]
        rows.add(r, t_qc[k], 1.0).add(r, t_alpha[k], A_hat**2).add(r, varphi[k], -1.0).add(r, s[k], -1.0)
        rows.add_const(r, np.full(I, -p["S"][j] ** 2))
    b.constrain("inv.sample", rows, "nonneg")
    budget = RowSet(P)
    k = np.arange(P)
    budget.add(k[:, None], s, 1.0 / I).add(k, varpi, -inst.assets.eta_inv)
    b.constrain("inv.budget", budget, "nonneg")
    _cvar_link(b, "inv", varpi, varphi)
    return pv_nodes


# -- multi-source DRO ------------------------------------------------------------------


def add_worst_case_block(
    b: ProgramBuilder,
    tag: str,
    coef_const: np.ndarray,
    coef_alpha: np.ndarray,
    alpha_vars: np.ndarray,
    offset: RowSet,
    samples: tuple[np.ndarray, ...],
    lower: tuple[np.ndarray, ...],
    upper: tuple[np.ndarray, ...],
    slices: tuple[slice, ...],
    lam: np.ndarray,
    s: np.ndarray,
    shared_z: bool = False,
) -> dict:
    """Rows ``s_i >= sup_{delta in box} max_k (<a'_k, delta> + c'_k) - sum_f lam_f ||delta_f - hat_f,i||_1``.

    ``a'_{k,m} = coef_const[k, m] + coef_alpha[k, m] * x[alpha_vars[m]]`` (``alpha_vars[m] < 0``:
    constant) and ``c'_k`` is row k of ``offset``.  The supremum is dualised per cluster
    with multipliers ``z`` and splits ``a' - z = u - l``, ``u, l >= 0``, ``|z| <= lam_f``.
    ``shared_z`` uses one ``z`` per (k, f, i) instead of one per feature.
    Returns ``{cluster slot: (z, u, l, kept columns)}``.
    """
    K = coef_const.shape[0]
    I = s.size
    epi = RowSet(K * I)
    er = np.arange(K * I).reshape(K, I)
    # c'_k replicated over samples
    r0, c0, v0 = offset.triplets()
    for i in range(I):
        epi.add(er[r0, i], c0, v0)
    epi.add_const(er, np.repeat(offset.const[:, None], I, axis=1))
    epi.add(er, s[None, :], -1.0)
    out = {}
    for kf, sl in enumerate(slices):
        X, lo, hi = samples[kf], lower[kf], upper[kf]
        av = alpha_vars[sl]
        cc, ca = coef_const[:, sl], coef_alpha[:, sl]
        # a zero-width support pins delta_m = hat_m for every admissible distribution,
        # so the column contributes a'_{k,m} * value exactly and needs no multipliers
        fixed = (hi - lo) <= 1e-12 * (1.0 + np.abs(hi))
        for m in np.flatnonzero(fixed):
            epi.add_const(er, cc[:, m][:, None] * X[None, :, m])
            if av[m] >= 0:
                epi.add(er, av[m], ca[:, m][:, None] * X[None, :, m])
        keep = np.flatnonzero(~fixed)
        X, lo, hi, av, cc, ca = X[:, keep], lo[keep], hi[keep], av[keep], cc[:, keep], ca[:, keep]
        d = keep.size
        if d == 0:
            continue
        zshape = (K, I, 1) if shared_z else (K, I, d)
        z = b.var(f"{tag}.z[{kf}]", zshape)
        u = b.var(f"{tag}.u[{kf}]", (K, I, d), lb=0.0)
        l = b.var(f"{tag}.l[{kf}]", (K, I, d), lb=0.0)
        out[kf] = (z, u, l, keep)
        # epigraph: sum_m z delta_hat + u upper - l lower
        zz = np.broadcast_to(z, (K, I, d))
        epi.add(er[:, :, None], zz, np.broadcast_to(X[None, :, :], (K, I, d)))
        epi.add(er[:, :, None], u, np.broadcast_to(hi[None, None, :], (K, I, d)))
        epi.add(er[:, :, None], l, np.broadcast_to(-lo[None, None, :], (K, I, d)))
        # split: a'_{k,m} - z - u + l = 0
        split = RowSet(K * I * d)
        sr = np.arange(K * I * d).reshape(K, I, d)
        split.add(sr, zz, -1.0).add(sr, u, -1.0).add(sr, l, 1.0)
        split.add_const(sr, np.broadcast_to(cc[:, None, :], (K, I, d)))
        for m in np.flatnonzero(av >= 0):
            split.add(sr[:, :, m], av[m], np.broadcast_to(ca[:, m][:, None], (K, I)))
        b.constrain(f"{tag}.split[{kf}]", split, "zero")
        # |z| <= lam_f
        nz = int(np.prod(zshape))
        cap = RowSet(2 * nz)
        zr = np.arange(nz)
        cap.add(zr, z.ravel(), 1.0).add(zr, lam[kf], -1.0)
        cap.add(nz + zr, z.ravel(), -1.0).add(nz + zr, lam[kf], -1.0)
        b.constrain(f"{tag}.zcap[{kf}]", cap, "nonneg")
    b.constrain(f"{tag}.epi", epi, "nonneg")
    return out


def build_msw_dro(
    inst: OpfInstance,
    fixed: dict | None = None,
    cost_corners: str = "base",
    shared_z: bool = False,
) -> BuiltProgram:
    """Multi-source Wasserstein DRO program.

    ``cost_corners="all"`` adds the two mixed support/sample corners to each
    piecewise-linear cost row; the default keeps the published four rows.
    """
    _check_instance(inst)
    if cost_corners not in ("base", "all"):
        raise ValueError("cost_corners must be 'base' or 'all'")
    b = ProgramBuilder()
    N, I, F = inst.n, inst.samples.n_samples, len(inst.cluster_ids)
    eps = inst.eps
    dv, p = _decision_vars(b, inst, fixed)
    _abs_epigraph(b, dv, p, N)
    nd = _node_feature_data(inst)
    hs = assemble_voltage_halfspaces(inst)

    lam_co = b.var("lambda_co", F, lb=0.0)
    b.minimize(lam_co, eps)
    _dro_cost_rows(b, inst, dv, p, nd, lam_co, cost_corners)

    # voltage block with the extra all-zero piece K+1
    K = hs.K
    lam_vol = b.var("lambda_vol", F, lb=0.0)
    s_vol = b.var("s_vol", I)
    varpi = b.var("varpi_vol")
    varphi = b.var("varphi_vol")
    D = hs.coef_const.shape[1]
    coef_const = np.vstack([hs.coef_const, np.zeros((1, D))])
    coef_alpha = np.vstack([hs.coef_alpha, np.zeros((1, D))])
    alpha_vars = np.where(hs.alpha_node >= 0, dv["alpha"][np.maximum(hs.alpha_node, 0)], -1)
    alpha_vars = np.where(p["S"][np.maximum(hs.alpha_node, 0)] > 0, alpha_vars, -1)
    offset = RowSet(K + 1)
    _halfspace_offset_rows(offset, np.arange(K), hs, dv, np.arange(K))
    offset.add(np.arange(K), varphi, -1.0)
    slices = hs.cluster_slices
    add_worst_case_block(
        b, "vol", coef_const, coef_alpha, alpha_vars, offset,
        inst.samples.data, inst.support.lower, inst.support.upper, slices, lam_vol, s_vol, shared_z,
    )
    budget = RowSet(1).add(0, lam_vol, eps).add(0, s_vol, 1.0 / I).add(0, varpi, -inst.assets.eta_vol)
    b.constrain("vol.budget", budget, "nonneg")
    _cvar_link(b, "vol", varpi, varphi)

    pv_nodes = _dro_inverter_block(b, inst, dv, p, nd)
    layout = DecisionLayout(dict(b.var_blocks), inst.cluster_ids, tuple(pv_nodes), inst.net.node_order, K)
    return BuiltProgram(b.build(), layout, _handles(inst, pv_nodes), hs, "dro")


def _handles(inst: OpfInstance, pv_nodes) -> ConstraintHandles:
    pv_nodes = tuple(pv_nodes)
    return ConstraintHandles(pv_nodes=pv_nodes, pv_clusters=tuple(inst.index.pv_position(n)[0] for n in pv_nodes))


def _dro_cost_rows(b, inst, dv, p, nd, lam_co, cost_corners: str) -> None:
    N, I = inst.n, inst.samples.n_samples
    s1 = b.var("s_co1", (N, I), lb=0.0)
    s2 = b.var("s_co2", (N, I), lb=0.0)
    b.minimize(s1, 1.0 / I)
    b.minimize(s2, 1.0 / I)
    n_pieces1 = 4 if cost_corners == "base" else 8
    rows1 = RowSet(n_pieces1 * N * I)
    rows2 = RowSet(3 * N * I)
    for n, d in enumerate(nd):
        c, dd, h = p["c"][n], p["d"][n], p["h"][n]
        al, pb = dv["alpha"][n], dv["p_B"][n]
        ll, la = lam_co[d["kl"]], lam_co[d["ka"]]
        Lh, Llo, Lhi = d["L_hat"], d["L_lo"], d["L_hi"]
        Ah, Alo, Ahi = d["A_hat"], d["A_lo"], d["A_hi"]
        base = n * I + np.arange(I)

        def c_piece(r, L, A, pen_l, pen_a):
            # c (L - (1-alpha) A - p_B) - lam_l pen_l - lam_a pen_a - s <= 0
            rows1.add(r, al, c * A).add(r, pb, -c).add(r, s1[n], -1.0)
            rows1.add(r, ll, -pen_l).add(r, la, -pen_a)
            rows1.add_const(r, c * (L - A))

        def d_piece(r, L, A, pen_l, pen_a):
            # d ((1-alpha) A - L + p_B) - lam_l pen_l - lam_a pen_a - s <= 0
            rows1.add(r, al, -dd * A).add(r, pb, dd).add(r, s1[n], -1.0)
            rows1.add(r, ll, -pen_l).add(r, la, -pen_a)
            rows1.add_const(r, dd * (A - L))

        zero = np.zeros(I)
        blk = N * I
        c_piece(base, Lhi, Alo, Lhi - Lh, Ah - Alo)
        d_piece(blk + base, Llo, Ahi, Lh - Llo, Ahi - Ah)
        c_piece(2 * blk + base, Lh, Ah, zero, zero)
        d_piece(3 * blk + base, Lh, Ah, zero, zero)
        if cost_corners == "all":
            c_piece(4 * blk + base, Lhi, Ah, Lhi - Lh, zero)
            c_piece(5 * blk + base, Lh, Alo, zero, Ah - Alo)
            d_piece(6 * blk + base, Llo, Ah, Lh - Llo, zero)
            d_piece(7 * blk + base, Lh, Ahi, zero, Ahi - Ah)

        # curtailment: h alpha p_av
        for k, (A, pen) in enumerate(((Ahi, Ahi - Ah), (Alo, Alo - Ah), (Ah, zero))):
            r = k * blk + base
            rows2.add(r, al, h * A).add(r, s2[n], -1.0)
            if k == 0:
                rows2.add(r, la, -pen)
            elif k == 1:
                rows2.add(r, la, pen)
        del zero
    b.constrain("co.cost", rows1, "nonneg")
    b.constrain("co.curtail", rows2, "nonneg")


def _dro_inverter_block(b, inst, dv, p, nd) -> list[int]:
    pv_nodes = inst.pv_nodes
    pos = np.array([inst.net.index(n) for n in pv_nodes], dtype=int)
    P, I = pos.size, inst.samples.n_samples
    if P == 0:
        return []
    ids = list(inst.cluster_ids)
    t_alpha, t_qc = _pv_cones(b, dv, pos)
    lam = b.var("lambda_inv", P, lb=0.0)
    varpi = b.var("varpi_inv", P)
    varphi = b.var("varphi_inv", P)
    s = b.var("s_inv", (P, I), lb=0.0)
    box = RowSet(P * I)
    smp = RowSet(P * I)
    budget = RowSet(P)
    for k, j in enumerate(pos):
        d = nd[j]
        r = k * I + np.arange(I)
        S2 = p["S"][j] ** 2
        # w = t_qc - S^2 - varphi
        for rows in (box, smp):
            rows.add(r, t_qc[k], 1.0).add(r, varphi[k], -1.0).add(r, s[k], -1.0)
            rows.add_const(r, np.full(I, -S2))
        box.add(r, t_alpha[k], d["A_hi"] ** 2).add(r, lam[k], -(d["A_hi"] - d["A_hat"]))
        smp.add(r, t_alpha[k], d["A_hat"] ** 2)
        f = inst.index.pv_position(pv_nodes[k])[0]
        budget.add(k, lam[k], inst.eps[ids.index(f)]).add(k, s[k], 1.0 / I).add(k, varpi[k], -inst.assets.eta_inv)
    b.constrain("inv.box", box, "nonneg")
    b.constrain("inv.sample", smp, "nonneg")
    b.constrain("inv.budget", budget, "nonneg")
    _cvar_link(b, "inv", varpi, varphi)
    return pv_nodes


# -- oracles and evaluation -------------------------------------------------------------


def empirical_cvar(losses, eta: float) -> float:
    """``min_t t + sum_i [loss_i - t]^+ / (eta I)``, scanning t over the sample points."""
    x = np.asarray(losses, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty losses")
    if not 0 < eta <= 1:
        raise ValueError("eta must lie in (0, 1]")
    t = np.sort(x)
    vals = t + np.maximum(x[None, :] - t[:, None], 0.0).sum(axis=1) / (eta * x.size)
    return float(vals.min())


def voltage_block_value(inst: OpfInstance, decisions: dict, cfg: SolverConfig | None = None) -> float:
    """CVaR-type value ``varphi + varpi`` of the DRO voltage block at fixed decisions.

    The sign/link rows are dropped, so the value is the worst-case CVaR of the
    joint voltage loss; at zero radii it reduces to the empirical CVaR.
    """
    b = ProgramBuilder()
    dv, p = _decision_vars(b, inst, decisions)
    hs = assemble_voltage_halfspaces(inst)
    K, I, F = hs.K, inst.samples.n_samples, len(inst.cluster_ids)
    lam = b.var("lambda_vol", F, lb=0.0)
    s = b.var("s_vol", I)
    varpi = b.var("varpi_vol")
    varphi = b.var("varphi_vol")
    D = hs.coef_const.shape[1]
    A, c = hs.evaluate(decisions["alpha"], decisions["q_c"], decisions["p_B"], decisions["q_B"])
    offset = RowSet(K + 1).add(np.arange(K), varphi, -1.0).add_const(np.arange(K), c)
    add_worst_case_block(
        b, "vol", np.vstack([A, np.zeros((1, D))]), np.zeros((K + 1, D)), np.full(D, -1), offset,
        inst.samples.data, inst.support.lower, inst.support.upper, hs.cluster_slices, lam, s,
    )
    eta = inst.assets.eta_vol
    b.constrain("vol.budget", RowSet(1).add(0, lam, inst.eps).add(0, s, 1.0 / I).add(0, varpi, -eta), "nonneg")
    b.minimize(varphi, 1.0)
    b.minimize(varpi, 1.0)
    sol = solve(b.build(), cfg)
    if not sol.optimal:
        raise RuntimeError(f"voltage block solve failed: {sol.status}")
    return sol.objective


def worst_case_expectation(
    slopes, intercepts, samples, lower, upper, eps: float, cfg: SolverConfig | None = None, shared_z: bool = False
) -> float:
    """``sup_{W1(Q, P_hat) <= eps} E_Q[max_k slopes_k . delta + intercepts_k]`` for one cluster."""
    slopes = np.atleast_2d(np.asarray(slopes, float))
    X = np.asarray(samples, float)
    if X.ndim == 1:
        X = X[:, None]
    K, D = slopes.shape
    I = X.shape[0]
    b = ProgramBuilder()
    lam = b.var("lambda", 1, lb=0.0)
    s = b.var("s", I)
    offset = RowSet(K).add_const(np.arange(K), np.asarray(intercepts, float))
    add_worst_case_block(
        b, "wc", slopes, np.zeros_like(slopes), np.full(D, -1), offset,
        (X,), (np.atleast_1d(np.asarray(lower, float)),), (np.atleast_1d(np.asarray(upper, float)),),
        (slice(0, D),), lam, s, shared_z,
    )
    b.minimize(lam, eps)
    b.minimize(s, 1.0 / I)
    sol = solve(b.build(), cfg)
    if not sol.optimal:
        raise RuntimeError(f"worst-case expectation solve failed: {sol.status}")
    return sol.objective


def realized_cost(inst: OpfInstance, decisions: dict, delta_nodes: np.ndarray) -> np.ndarray:
    """Cost of fixed decisions under realisations shaped (S, N, 3) in p.u."""
    p = inst.per_unit_params()
    alpha, q_c, p_B, q_B = (np.asarray(decisions[k]) for k in ("alpha", "q_c", "p_B", "q_B"))
    p_av, p_l = delta_nodes[..., 0], delta_nodes[..., 1]
    net = p_l - p_B - (1 - alpha) * p_av
    per_node = (
        p["c"] * np.maximum(net, 0) + p["d"] * np.maximum(-net, 0)
        + p["e"] * (np.abs(q_c) + np.abs(q_B)) + p["h"] * alpha * p_av
    )
    return per_node.sum(axis=-1)


def injections(decisions: dict, delta_nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Net nodal injections ``(p, q)`` in p.u. for realisations shaped (S, N, 3)."""
    alpha, q_c, p_B, q_B = (np.asarray(decisions[k]) for k in ("alpha", "q_c", "p_B", "q_B"))
    p = (1 - alpha) * delta_nodes[..., 0] - delta_nodes[..., 1] + p_B
    q = q_c - delta_nodes[..., 2] + q_B
    return p, q
