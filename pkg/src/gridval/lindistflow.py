"""LinDistFlow squared-voltage sensitivities for radial feeders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .case_io import Network


@dataclass(frozen=True)
class VoltageSensitivity:
    R: np.ndarray  # d rho / d p, (N, N)
    B: np.ndarray  # d rho / d q, (N, N)
    a: np.ndarray  # rho at zero injection, (N,)
    node_order: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.a.shape[0]


def path_matrix(net: Network) -> np.ndarray:
    """T[j, e] = 1 when branch e lies on the path from the slack to node j."""
    n = net.n_nodes
    T = np.zeros((n, n))
    parent_of = net.parent
    for j, bus in enumerate(net.node_order):
        b = bus
        while b != net.slack:
            T[j, net.index(b)] = 1.0
            b = parent_of[b]
    return T


def sensitivity_matrices(net: Network, v0_sq: float = 1.0) -> VoltageSensitivity:
    if not v0_sq > 0:
        raise ValueError("v0_sq must be positive")
    T = path_matrix(net)
    r = np.array([br.r_pu for br in net.branches])
    x = np.array([br.x_pu for br in net.branches])
    R = 2.0 * (T * r) @ T.T
    B = 2.0 * (T * x) @ T.T
    return VoltageSensitivity(R, B, np.full(net.n_nodes, float(v0_sq)), net.node_order)


def predict_voltages(sens: VoltageSensitivity, p, q) -> np.ndarray:
    """Squared voltages ``R p + B q + a`` for net injections in p.u.

    ``p`` and ``q`` may carry leading batch dimensions; the last axis is nodes.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[-1] != sens.n or q.shape[-1] != sens.n:
        raise ValueError(f"injection vectors must have {sens.n} entries")
    return p @ sens.R.T + q @ sens.B.T + sens.a
