"""Unbalanced LinDistFlow: per-edge sensitivity matrices and squared-voltage
propagation from nodal injections."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FeederError, NetworkModel

SQ3 = np.sqrt(3.0)

# sign of the sqrt(3) coupling term for each ordered phase pair (row, col)
_A_SIGN = np.array([[0, -1, 1], [1, 0, -1], [-1, 1, 0]], dtype=float)


def sensitivity_matrices(r: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """A and B for one edge from its 3x3 per-unit r and x."""
    r = np.asarray(r, float)
    x = np.asarray(x, float)
    A = r + _A_SIGN * SQ3 * x
    B = x - _A_SIGN * SQ3 * r
    np.fill_diagonal(A, -2.0 * np.diag(r))
    np.fill_diagonal(B, -2.0 * np.diag(x))
    return A, B


@dataclass
class LineSensitivity:
    A: dict[str, np.ndarray]
    B: dict[str, np.ndarray]

    def drop(self, edge_id: str, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """Change in squared voltage from sending to receiving end."""
        return self.A[edge_id] @ p + self.B[edge_id] @ q


def build_sensitivities(model: NetworkModel) -> LineSensitivity:
    A, B = {}, {}
    for e in model.edges.values():
        if len(e.phases) > 1 and not e.coupled:
            raise FeederError(f"edge {e.id} has no phase-pair impedances", e.id)
        a, b = sensitivity_matrices(e.r, e.x)
        m = e.mask
        keep = np.outer(m, m)
        A[e.id] = np.where(keep, a, 0.0)
        B[e.id] = np.where(keep, b, 0.0)
    return LineSensitivity(A, B)


def subtree_flows(model: NetworkModel, nodes: list[str], p_net: dict[str, np.ndarray],
                  q_net: dict[str, np.ndarray]) -> tuple[dict, dict]:
    """Lossless parent-to-child edge flows for net loads (load minus generation)."""
    live = set(nodes)
    order = [n for n in model.node_order if n in live]
    fp = {n: np.array(p_net.get(n, np.zeros(3)), float) for n in order}
    fq = {n: np.array(q_net.get(n, np.zeros(3)), float) for n in order}
    P, Q = {}, {}
    for n in reversed(order):
        par = model.parent_of(n)
        if par is None or par not in live:
            continue
        e = model.parent_edge[n]
        P[e], Q[e] = fp[n], fq[n]
        fp[par] = fp[par] + fp[n]
        fq[par] = fq[par] + fq[n]
    return P, Q


def lindistflow_voltages(model: NetworkModel, sens: LineSensitivity, nodes: list[str],
                         p_net: dict[str, np.ndarray], q_net: dict[str, np.ndarray],
                         v_slack: float = 1.04) -> dict[str, np.ndarray]:
    """Squared voltage magnitudes (pu) with the root held at ``v_slack``.

    Injections are per-unit net loads per phase. Phases absent at a node are nan.
    """
    P, Q = subtree_flows(model, nodes, p_net, q_net)
    live = set(nodes)
    v2 = {}
    for n in model.node_order:
        if n not in live:
            continue
        par = model.parent_of(n)
        if par is None or par not in live:
            v2[n] = np.where(model.nodes[n].mask, v_slack ** 2, np.nan)
            continue
        e = model.parent_edge[n]
        v = v2[par] + sens.drop(e, P[e], Q[e])
        v2[n] = np.where(model.nodes[n].mask, v, np.nan)
    return v2
