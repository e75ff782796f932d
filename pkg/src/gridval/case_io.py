"""MATPOWER-subset case parsing, radial network model and scenario assets.

Only the ``mpc.baseMVA``, ``mpc.bus`` and ``mpc.branch`` assignments are
interpreted.  Other ``mpc.*`` matrix blocks are skipped; everything else in
the file (function header, comments, string assignments) is ignored.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping

import numpy as np

DATA_DIR = Path(__file__).parent / "data"
CASE33BW = DATA_DIR / "case33bw.m"


class CaseParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        self.lineno = lineno
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(where + message)


class CaseStructureError(ValueError):
    """Required block missing or rows referencing undeclared buses."""


class NotRadialError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class BusRow:
    bus_id: int
    type: int
    pd: float  # MW
    qd: float  # MVAr
    base_kv: float
    vmax: float
    vmin: float


@dataclass(frozen=True)
class BranchRow:
    from_bus: int
    to_bus: int
    r: float
    x: float
    status: int


@dataclass(frozen=True)
class RawCase:
    base_mva: float
    bus_rows: tuple[BusRow, ...]
    branch_rows: tuple[BranchRow, ...]

    def __post_init__(self):
        if not self.base_mva > 0:
            raise CaseStructureError(f"baseMVA must be positive, got {self.base_mva}")
        ids = [b.bus_id for b in self.bus_rows]
        if len(set(ids)) != len(ids):
            raise CaseStructureError("duplicate bus ids")
        known = set(ids)
        for br in self.branch_rows:
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise CaseStructureError(
                        f"branch {br.from_bus}-{br.to_bus} references undeclared bus {end}"
                    )


_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")
_REQUIRED = ("baseMVA", "bus", "branch")


def _strip_comment(line: str) -> str:
    pos = line.find("%")
    return line if pos < 0 else line[:pos]


def _parse_matrix(lines: list[tuple[int, str]], name: str) -> list[list[float]]:
    rows: list[list[float]] = []
    for lineno, text in lines:
        for chunk in text.split(";"):
            tokens = chunk.replace(",", " ").split()
            if not tokens:
                continue
            try:
                rows.append([float(t) for t in tokens])
            except ValueError:
                raise CaseParseError(f"non-numeric entry in mpc.{name}: {chunk.strip()!r}", lineno)
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise CaseParseError(f"ragged rows in mpc.{name} (widths {sorted(widths)})", lines[0][0])
    return rows


def _collect_blocks(text: str) -> tuple[dict[str, float], dict[str, tuple[int, list[list[float]]]]]:
    scalars: dict[str, float] = {}
    matrices: dict[str, tuple[int, list[list[float]]]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        body = _strip_comment(lines[i])
        m = _ASSIGN.match(body)
        i += 1
        if not m:
            continue
        name, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("["):
            content = [(lineno, rhs[1:])]
            closed = "]" in rhs
            while not closed:
                if i >= len(lines):
                    raise CaseParseError(f"unterminated matrix mpc.{name}", lineno)
                seg = _strip_comment(lines[i])
                content.append((i + 1, seg))
                i += 1
                closed = "]" in seg
            last_no, last = content[-1]
            content[-1] = (last_no, last[: last.index("]")])
            try:
                matrices[name] = (lineno, _parse_matrix(content, name))
            except CaseParseError:
                if name in _REQUIRED:
                    raise
        elif name == "baseMVA":
            try:
                scalars[name] = float(rhs.rstrip(";").strip())
            except ValueError:
                raise CaseParseError(f"baseMVA is not numeric: {rhs!r}", lineno)
    return scalars, matrices


def parse_matpower_case(text: str) -> RawCase:
    """Parse MATPOWER case text into bus and branch rows.

    Bus columns used: 1 id, 2 type, 3 Pd, 4 Qd, 10 baseKV, 12 Vmax, 13 Vmin.
    Branch columns used: 1 from, 2 to, 3 r, 4 x, 11 status.
    """
    scalars, matrices = _collect_blocks(text)
    if "baseMVA" not in scalars:
        raise CaseStructureError("missing mpc.baseMVA")
    for name in ("bus", "branch"):
        if name not in matrices:
            raise CaseStructureError(f"missing mpc.{name}")

    bus_line, bus_mat = matrices["bus"]
    if bus_mat and len(bus_mat[0]) < 13:
        raise CaseParseError("mpc.bus needs at least 13 columns", bus_line)
    buses = tuple(
        BusRow(int(r[0]), int(r[1]), r[2], r[3], r[9], r[11], r[12]) for r in bus_mat
    )
    br_line, br_mat = matrices["branch"]
    if br_mat and len(br_mat[0]) < 11:
        raise CaseParseError("mpc.branch needs at least 11 columns", br_line)
    branches = tuple(
        BranchRow(int(r[0]), int(r[1]), r[2], r[3], int(r[10])) for r in br_mat
    )
    return RawCase(scalars["baseMVA"], buses, branches)


def read_case(path: str | Path = CASE33BW) -> RawCase:
    return parse_matpower_case(Path(path).read_text())


def _num(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))


def format_matpower_case(raw: RawCase, name: str = "case") -> str:
    """Serialize a RawCase back to MATPOWER text (13 bus / 11 branch columns)."""
    out = [f"function mpc = {name}", "mpc.version = '2';", f"mpc.baseMVA = {raw.base_mva!r};", "mpc.bus = ["]
    for b in raw.bus_rows:
        cols = [b.bus_id, b.type, b.pd, b.qd, 0, 0, 1, 1, 0, b.base_kv, 1, b.vmax, b.vmin]
        out.append("\t" + "\t".join(_num(c) for c in cols) + ";")
    out += ["];", "mpc.branch = ["]
    for br in raw.branch_rows:
        cols = [br.from_bus, br.to_bus, br.r, br.x, 0, 0, 0, 0, 0, 0, br.status]
        out.append("\t" + "\t".join(_num(c) for c in cols) + ";")
    out.append("];")
    return "\n".join(out) + "\n"


def synthetic_case(
    parents: list[int],
    r_ohm=0.5,
    x_ohm=0.3,
    load_kw=100.0,
    load_kvar=50.0,
    base_mva: float = 10.0,
    base_kv: float = 12.66,
) -> RawCase:
    """Radial test feeder: bus 1 is the slack, bus k+2 hangs off ``parents[k]``.

    ``parents=[1, 2, 3]`` is a 3-branch chain, ``[1, 1, 1]`` a star.  Scalars
    broadcast over branches / load buses.
    """
    n = len(parents)
    r = np.broadcast_to(np.asarray(r_ohm, float), (n,))
    x = np.broadcast_to(np.asarray(x_ohm, float), (n,))
    pl = np.broadcast_to(np.asarray(load_kw, float), (n,))
    ql = np.broadcast_to(np.asarray(load_kvar, float), (n,))
    buses = [BusRow(1, 3, 0.0, 0.0, base_kv, 1.1, 0.9)]
    buses += [BusRow(k + 2, 1, float(pl[k]) / 1000, float(ql[k]) / 1000, base_kv, 1.1, 0.9) for k in range(n)]
    branches = [BranchRow(int(parents[k]), k + 2, float(r[k]), float(x[k]), 1) for k in range(n)]
    return RawCase(base_mva, tuple(buses), tuple(branches))


@dataclass(frozen=True)
class Branch:
    parent: int
    child: int
    r_pu: float
    x_pu: float


@dataclass(frozen=True)
class Network:
    """Radial feeder rooted at the slack bus; nodes exclude the slack."""

    slack: int
    node_order: tuple[int, ...]
    branches: tuple[Branch, ...]  # branches[j] feeds node_order[j]
    base_mva: float
    base_kv: float
    load_kw: tuple[float, ...]  # single-period base loads, aligned with node_order
    load_kvar: tuple[float, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.node_order)

    def index(self, bus: int) -> int:
        try:
            return self._pos[bus]
        except KeyError:
            raise KeyError(f"bus {bus} is not a non-slack node of this network") from None

    @cached_property
    def _pos(self) -> dict[int, int]:
        return {b: k for k, b in enumerate(self.node_order)}

    @property
    def parent(self) -> dict[int, int]:
        return {br.child: br.parent for br in self.branches}

    @property
    def kw_per_pu(self) -> float:
        return self.base_mva * 1000.0


def build_network(raw: RawCase, impedance_unit: str = "ohm") -> Network:
    """Convert in-service branches to a per-unit radial tree rooted at the slack."""
    slacks = [b.bus_id for b in raw.bus_rows if b.type == 3]
    if len(slacks) != 1:
        raise ConfigurationError(f"expected exactly one slack bus, found {len(slacks)}")
    slack = slacks[0]
    bus_by_id = {b.bus_id: b for b in raw.bus_rows}
    active = [br for br in raw.branch_rows if br.status != 0]
    if len(active) != len(raw.bus_rows) - 1:
        raise NotRadialError(
            f"not radial: {len(active)} in-service branches for {len(raw.bus_rows)} buses"
        )

    adj: dict[int, list[tuple[int, BranchRow]]] = {b: [] for b in bus_by_id}
    for br in active:
        adj[br.from_bus].append((br.to_bus, br))
        adj[br.to_bus].append((br.from_bus, br))

    if impedance_unit not in ("ohm", "pu"):
        raise ConfigurationError(f"unknown impedance unit {impedance_unit!r}")

    order: list[int] = []
    branches: list[Branch] = []
    seen = {slack}
    queue = deque([slack])
    while queue:
        u = queue.popleft()
        for v, br in sorted(adj[u], key=lambda t: t[0]):
            if v in seen:
                continue
            seen.add(v)
            queue.append(v)
            if impedance_unit == "ohm":
                kv = bus_by_id[u].base_kv
                if kv <= 0:
                    raise ConfigurationError(f"bus {u} has no base kV for ohm conversion")
                zbase = kv**2 / raw.base_mva
                r, x = br.r / zbase, br.x / zbase
            else:
                r, x = br.r, br.x
            if r < 0 or x < 0:
                raise ConfigurationError(f"negative impedance on branch {u}-{v}")
            order.append(v)
            branches.append(Branch(u, v, r, x))
    if len(seen) != len(bus_by_id):
        raise NotRadialError("not radial: network is disconnected")

    return Network(
        slack=slack,
        node_order=tuple(order),
        branches=tuple(branches),
        base_mva=raw.base_mva,
        base_kv=bus_by_id[slack].base_kv,
        load_kw=tuple(bus_by_id[b].pd * 1000.0 for b in order),
        load_kvar=tuple(bus_by_id[b].qd * 1000.0 for b in order),
    )


# -- scenario assets -------------------------------------------------------

PV_HIGH_KW = {
    3: 500, 5: 500, 6: 750, 8: 400, 11: 750, 12: 800, 14: 200,
    16: 500, 17: 200, 18: 500, 19: 200, 21: 500, 22: 500, 23: 200,
    25: 300, 27: 600, 29: 600, 31: 300, 33: 800,
}
PV_LOW_NODES = (3, 5, 6, 8, 11, 12, 14, 21, 29, 33)
PV_LOW_KW = {n: PV_HIGH_KW[n] for n in PV_LOW_NODES}
DER_DEFAULT_KW = {19: 50.0, 20: 22.0, 24: 50.0, 25: 50.0}


@dataclass(frozen=True)
class DerLimits:
    p_min: float
    p_max: float
    q_min: float = 0.0
    q_max: float = 0.0


@dataclass(frozen=True)
class CostCoeffs:
    c: float = 10.0  # grid purchase
    d: float = 3.0  # feed-in payment
    e: float = 3.0  # reactive supply payment
    h: float = 6.0  # curtailment reimbursement


@dataclass(frozen=True)
class AssetTable:
    pv_kw: Mapping[int, float]
    der: Mapping[int, DerLimits]
    cost_default: CostCoeffs = CostCoeffs()
    cost_nodes: Mapping[int, CostCoeffs] = field(default_factory=dict)
    v_min: float = 0.9  # squared magnitude, p.u.^2
    v_max: float = 1.1
    eta_vol: float = 0.05
    eta_inv: float = 0.05

    def __post_init__(self):
        for n, s in self.pv_kw.items():
            if s < 0:
                raise ConfigurationError(f"negative PV rating at node {n}")
        for n, lim in self.der.items():
            if lim.p_min > lim.p_max or lim.q_min > lim.q_max:
                raise ConfigurationError(f"inverted DER limits at node {n}")
        if not self.v_min < self.v_max:
            raise ConfigurationError("v_min must be below v_max")
        for name in ("eta_vol", "eta_inv"):
            eta = getattr(self, name)
            if not 0 < eta <= 1:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {eta}")

    def cost(self, bus: int) -> CostCoeffs:
        return self.cost_nodes.get(bus, self.cost_default)

    def pv_nodes(self, net: Network) -> list[int]:
        return [b for b in net.node_order if self.pv_kw.get(b, 0.0) > 0]

    def arrays(self, net: Network) -> dict[str, np.ndarray]:
        """Per-node parameter vectors aligned with ``net.node_order`` (kW units)."""
        nodes = net.node_order
        der = [self.der.get(b, DerLimits(0.0, 0.0)) for b in nodes]
        costs = [self.cost(b) for b in nodes]
        return {
            "S": np.array([self.pv_kw.get(b, 0.0) for b in nodes]),
            "p_B_min": np.array([d.p_min for d in der]),
            "p_B_max": np.array([d.p_max for d in der]),
            "q_B_min": np.array([d.q_min for d in der]),
            "q_B_max": np.array([d.q_max for d in der]),
            "c": np.array([k.c for k in costs]),
            "d": np.array([k.d for k in costs]),
            "e": np.array([k.e for k in costs]),
            "h": np.array([k.h for k in costs]),
        }


def _node_keys(mapping: Mapping) -> dict[int, object]:
    return {int(k): v for k, v in mapping.items()}


def load_scenario_config(doc: Mapping | None = None, net: Network | None = None) -> AssetTable:
    """Build an AssetTable from a scenario document, filling the bundled defaults.

    Recognised keys: ``pv`` ({"case": "high"|"low"} and/or {"ratings_kw": {node: kW}}),
    ``der`` ({node: {"p_max", "p_min", "q_min", "q_max"}}), ``cost`` ({"c","d","e","h",
    "nodes": {node: {...}}}), ``voltage_limits`` ({"v_min","v_max"}) and ``risk``
    ({"eta_vol","eta_inv"}).  Other keys (``profiles``, ``clusters``) are read elsewhere.
    """
    doc = dict(doc or {})
    pv_doc = doc.get("pv") or {}
    case = str(pv_doc.get("case", "high")).lower()
    if case not in ("high", "low"):
        raise ConfigurationError(f"unknown PV case {case!r}")
    pv = dict(PV_HIGH_KW if case == "high" else PV_LOW_KW)
    if "ratings_kw" in pv_doc:
        pv = {n: float(v) for n, v in _node_keys(pv_doc["ratings_kw"]).items()}

    if "der" in doc:
        der = {}
        for n, spec in _node_keys(doc["der"]).items():
            p_max = float(spec["p_max"])
            der[n] = DerLimits(
                float(spec.get("p_min", -p_max)), p_max,
                float(spec.get("q_min", 0.0)), float(spec.get("q_max", 0.0)),
            )
    else:
        der = {n: DerLimits(-lim, lim) for n, lim in DER_DEFAULT_KW.items()}

    cost_doc = dict(doc.get("cost") or {})
    per_node = _node_keys(cost_doc.pop("nodes", {}) or {})
    default = CostCoeffs(**{k: float(v) for k, v in cost_doc.items()})
    cost_nodes = {
        n: CostCoeffs(**{**default.__dict__, **{k: float(v) for k, v in spec.items()}})
        for n, spec in per_node.items()
    }

    vl = doc.get("voltage_limits") or {}
    risk = doc.get("risk") or {}
    table = AssetTable(
        pv_kw=pv,
        der=der,
        cost_default=default,
        cost_nodes=cost_nodes,
        v_min=float(vl.get("v_min", 0.9)),
        v_max=float(vl.get("v_max", 1.1)),
        eta_vol=float(risk.get("eta_vol", 0.05)),
        eta_inv=float(risk.get("eta_inv", 0.05)),
    )
    if net is not None:
        known = set(net.node_order)
        for kind, nodes in (("PV", pv), ("DER", der), ("cost", cost_nodes)):
            bad = sorted(set(nodes) - known)
            if bad:
                raise ConfigurationError(f"{kind} node(s) {bad} not in network")
    return table


def read_scenario_config(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())
