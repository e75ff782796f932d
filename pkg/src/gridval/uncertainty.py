"""Data providers, forecast sampling, support boxes and exact Wasserstein distances."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linear_sum_assignment, linprog

from .case_io import DATA_DIR, AssetTable, ConfigurationError, Network

FEATURES = ("p_av", "p_l", "q_l")
PROFILES_CSV = DATA_DIR / "profiles.csv"

# five aggregators of the modified 33-bus feeder (slack bus 1 excluded)
DEFAULT_CLUSTERS_33 = {
    1: tuple(range(2, 11)),
    2: tuple(range(11, 19)),
    3: tuple(range(19, 23)),
    4: tuple(range(23, 26)),
    5: tuple(range(26, 34)),
}


class PartitionError(ValueError):
    pass


class GenerationError(ValueError):
    pass


Item = tuple[int, str]  # (node, feature)


@dataclass(frozen=True)
class ClusterSet:
    """Partition of the uncertain (node, feature) pairs among data providers.

    Node-based clusters hold all three features of each member node, ordered
    ``(p_av, p_l, q_l)`` per node in cluster order.
    """

    clusters: tuple[tuple[int, tuple[Item, ...]], ...]

    def __post_init__(self):
        seen: dict[Item, int] = {}
        ids = [f for f, _ in self.clusters]
        if len(set(ids)) != len(ids):
            raise PartitionError("duplicate cluster ids")
        for f, items in self.clusters:
            for node, feat in items:
                if feat not in FEATURES:
                    raise PartitionError(f"unknown feature {feat!r}")
                if (node, feat) in seen:
                    raise PartitionError(
                        f"({node}, {feat}) assigned to clusters {seen[(node, feat)]} and {f}"
                    )
                seen[(node, feat)] = f

    @classmethod
    def by_nodes(cls, mapping: Mapping[int, Iterable[int]]) -> "ClusterSet":
        out = []
        for f, nodes in mapping.items():
            out.append((int(f), tuple((int(n), ft) for n in nodes for ft in FEATURES)))
        return cls(tuple(out))

    @classmethod
    def singletons(cls, net: Network) -> "ClusterSet":
        return cls.by_nodes({n: (n,) for n in net.node_order})

    @classmethod
    def load_pv_split(cls, net: Network) -> "ClusterSet":
        loads = tuple((n, ft) for n in net.node_order for ft in ("p_l", "q_l"))
        pv = tuple((n, "p_av") for n in net.node_order)
        return cls(((1, loads), (2, pv)))

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(f for f, _ in self.clusters)

    def items(self, f: int) -> tuple[Item, ...]:
        return dict(self.clusters)[f]

    def nodes(self, f: int) -> tuple[int, ...]:
        return tuple(dict.fromkeys(n for n, _ in self.items(f)))

    @cached_property
    def node_to_cluster(self) -> dict[int, int]:
        """Cluster owning each node's ``p_av`` feature (the f(n) of the inverter rows)."""
        out = {}
        for f, items in self.clusters:
            for n, ft in items:
                if ft == "p_av" or n not in out:
                    out[n] = f
        return out

    def check_partition(self, net: Network) -> None:
        want = {(n, ft) for n in net.node_order for ft in FEATURES}
        have = {it for _, items in self.clusters for it in items}
        if have != want:
            missing = sorted(want - have)[:5]
            extra = sorted(have - want)[:5]
            raise PartitionError(f"clusters do not partition the network features; missing {missing}, extra {extra}")


@dataclass(frozen=True)
class FeatureIndex:
    clusters: ClusterSet

    @cached_property
    def _lookup(self) -> dict[Item, tuple[int, int]]:
        return {it: (f, m) for f, items in self.clusters.clusters for m, it in enumerate(items)}

    def locate(self, node: int, feature: str) -> tuple[int, int]:
        """(cluster id, 0-based position inside that cluster's feature vector)."""
        return self._lookup[(node, feature)]

    def item(self, f: int, m: int) -> Item:
        return self.clusters.items(f)[m]

    def dim(self, f: int) -> int:
        return len(self.clusters.items(f))

    def pv_position(self, node: int) -> tuple[int, int]:
        """Selector used by the inverter rows and the ``m_n`` objective rows."""
        return self.locate(node, "p_av")

    def load_position(self, node: int) -> tuple[int, int]:
        """Selector used by the ``r_n`` objective rows."""
        return self.locate(node, "p_l")


def feature_index_map(clusters: ClusterSet) -> FeatureIndex:
    return FeatureIndex(clusters)


# -- forecasts -----------------------------------------------------------------


def load_profiles(path: str | Path = PROFILES_CSV) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = ("hour", "pv_scale", "load_scale_high", "load_scale_low")
    out = {c: np.array([float(r[c]) for r in rows]) for c in cols}
    if sorted(out["hour"].astype(int)) != list(range(24)):
        raise ConfigurationError("profiles must list hours 0-23 exactly once")
    order = np.argsort(out["hour"])
    return {c: v[order] for c, v in out.items()}


@dataclass(frozen=True)
class Forecast:
    """Point forecast per node, columns (p_av, p_l, q_l) in kW / kvar."""

    node_order: tuple[int, ...]
    values: np.ndarray

    def value(self, node: int, feature: str) -> float:
        return float(self.values[self.node_order.index(node), FEATURES.index(feature)])

    def vector(self, items: Sequence[Item]) -> np.ndarray:
        pos = {n: k for k, n in enumerate(self.node_order)}
        return np.array([self.values[pos[n], FEATURES.index(ft)] for n, ft in items])


def build_forecast(
    net: Network, assets: AssetTable, hour: int, load_case: str = "high", profiles=None
) -> Forecast:
    profiles = load_profiles() if profiles is None else profiles
    if load_case not in ("high", "low"):
        raise ConfigurationError(f"unknown load case {load_case!r}")
    h = int(hour)
    pv_scale = profiles["pv_scale"][h]
    load_scale = profiles[f"load_scale_{load_case}"][h]
    vals = np.column_stack(
        [
            [assets.pv_kw.get(n, 0.0) * pv_scale for n in net.node_order],
            np.asarray(net.load_kw) * load_scale,
            np.asarray(net.load_kvar) * load_scale,
        ]
    )
    return Forecast(net.node_order, vals)


# -- samples and support -----------------------------------------------------


@dataclass(frozen=True)
class SupportBox:
    lower: tuple[np.ndarray, ...]  # aligned with ClusterSet.clusters
    upper: tuple[np.ndarray, ...]

    def scaled(self, factor: float) -> "SupportBox":
        return SupportBox(tuple(l * factor for l in self.lower), tuple(u * factor for u in self.upper))


@dataclass(frozen=True)
class SampleSet:
    """Per-cluster sample matrices (I x d_f), row i of every cluster sharing index i."""

    index: FeatureIndex
    data: tuple[np.ndarray, ...]

    @property
    def aligned(self) -> bool:
        return len({d.shape[0] for d in self.data}) == 1

    @property
    def n_samples(self) -> int:
        if not self.aligned:
            raise ValueError("clusters carry different sample counts")
        return self.data[0].shape[0]

    def scaled(self, factor: float) -> "SampleSet":
        return SampleSet(self.index, tuple(d * factor for d in self.data))

    def subset(self, rows) -> "SampleSet":
        return SampleSet(self.index, tuple(d[rows] for d in self.data))

    def node_matrix(self, node_order: Sequence[int]) -> np.ndarray:
        """Samples rearranged to shape (I, N, 3) in network order."""
        out = np.zeros((self.n_samples, len(node_order), 3))
        pos = {n: k for k, n in enumerate(node_order)}
        for (f, items), d in zip(self.index.clusters.clusters, self.data):
            for m, (n, ft) in enumerate(items):
                out[:, pos[n], FEATURES.index(ft)] = d[:, m]
        return out


def default_support(forecast: Forecast, assets: AssetTable, index: FeatureIndex) -> SupportBox:
    """p_av in [0, S_n]; loads in [0.5, 1.2] times their forecast."""
    lower, upper = [], []
    for f, items in index.clusters.clusters:
        lo, hi = np.zeros(len(items)), np.zeros(len(items))
        for m, (n, ft) in enumerate(items):
            v = forecast.value(n, ft)
            if ft == "p_av":
                if v > 0 and n not in assets.pv_kw:
                    raise ConfigurationError(f"node {n} has a PV forecast but no rating")
                lo[m], hi[m] = 0.0, assets.pv_kw.get(n, 0.0)
            else:
                lo[m], hi[m] = sorted((0.5 * v, 1.2 * v))
        lower.append(lo)
        upper.append(hi)
    return SupportBox(tuple(lower), tuple(upper))


def generate_samples(
    forecast: Forecast,
    index: FeatureIndex,
    rel_std: float,
    n_samples: int,
    seed: int,
    support: SupportBox,
    max_tries: int = 100,
) -> SampleSet:
    """Independent normal draws around the forecast, truncated to the support.

    Out-of-box draws are redrawn up to ``max_tries`` times, then clipped.
    """
    if rel_std < 0:
        raise ValueError("rel_std must be nonnegative")
    if n_samples < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng(seed)
    data = []
    for (f, items), lo, hi in zip(index.clusters.clusters, support.lower, support.upper):
        mean = forecast.vector(items)
        tol = 1e-9 * (1.0 + np.abs(mean))
        outside = (mean < lo - tol) | (mean > hi + tol)
        if outside.any():
            bad = [items[m] for m in np.flatnonzero(outside)]
            raise GenerationError(f"forecast outside the support box for {bad}")
        std = rel_std * np.abs(mean)
        draw = rng.normal(mean, std, size=(n_samples, len(items)))
        for _ in range(max_tries):
            bad = (draw < lo) | (draw > hi)
            if not bad.any():
                break
            fresh = rng.normal(mean, std, size=draw.shape)
            draw = np.where(bad, fresh, draw)
        data.append(np.clip(draw, lo, hi))
    return SampleSet(index, tuple(data))


def write_samples_csv(samples: SampleSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cluster_id", "sample_index", "node_id", "p_av_kw", "p_l_kw", "q_l_kvar"])
        for (f, items), d in zip(samples.index.clusters.clusters, samples.data):
            nodes = list(dict.fromkeys(n for n, _ in items))
            for i in range(d.shape[0]):
                for n in nodes:
                    vals = {ft: "" for ft in FEATURES}
                    for m, (nn, ft) in enumerate(items):
                        if nn == n:
                            vals[ft] = repr(float(d[i, m]))
                    w.writerow([f, i, n, vals["p_av"], vals["p_l"], vals["q_l"]])


def read_samples_csv(path: str | Path, index: FeatureIndex) -> SampleSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    counts = {}
    for r in rows:
        counts[int(r["cluster_id"])] = max(counts.get(int(r["cluster_id"]), 0), int(r["sample_index"]) + 1)
    cols = {"p_av": "p_av_kw", "p_l": "p_l_kw", "q_l": "q_l_kvar"}
    data = {f: np.zeros((counts[f], index.dim(f))) for f in index.clusters.ids}
    for r in rows:
        f, i, n = int(r["cluster_id"]), int(r["sample_index"]), int(r["node_id"])
        for ft, col in cols.items():
            if r[col] != "":
                data[f][i, index.locate(n, ft)[1]] = float(r[col])
    return SampleSet(index, tuple(data[f] for f in index.clusters.ids))


# -- optimal transport -------------------------------------------------------


def _atoms(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("an empirical distribution needs at least one atom")
    return x


def wasserstein_distance(a, b) -> float:
    """Exact 1-Wasserstein distance between uniform empirical distributions.

    Ground metric is the l1 norm.  Atoms are rows of ``a`` and ``b``.
    """
    a, b = _atoms(a), _atoms(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    cost = np.abs(a[:, None, :] - b[None, :, :]).sum(axis=2)
    na, nb = cost.shape
    if na == nb:
        # uniform marginals of equal size: some permutation is optimal
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / na)
    # transportation LP over the coupling pi (row-major), marginals 1/na and 1/nb
    k = np.arange(na * nb)
    rows_eq = sp.csr_matrix(
        (np.ones(2 * na * nb), (np.concatenate([k // nb, na + k % nb]), np.concatenate([k, k]))),
        shape=(na + nb, na * nb),
    )
    rhs = np.concatenate([np.full(na, 1.0 / na), np.full(nb, 1.0 / nb)])
    # one marginal constraint is redundant
    res = linprog(cost.ravel(), A_eq=rows_eq[:-1], b_eq=rhs[:-1], bounds=(0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)
