"""Three-phase backward/forward sweep for radial feeders (constant-power loads)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import NetworkModel

SLACK_ANGLES = np.deg2rad([0.0, -120.0, 120.0])


class PowerFlowDiverged(RuntimeError):
    pass


@dataclass
class SweepResult:
    nodes: list[str]
    v: dict[str, np.ndarray]          # complex phase voltages, nan on absent phases
    slack_s: np.ndarray               # complex power injected at the slack per phase (pu)
    losses: np.ndarray                # complex series losses per phase (pu)
    iterations: int
    residual: float                   # |slack + gen - load - losses| summed over phases (pu)

    def vmag(self, n: str) -> np.ndarray:
        return np.abs(self.v[n])

    def v2(self, n: str) -> np.ndarray:
        return np.abs(self.v[n]) ** 2


def sweep_power_flow(model: NetworkModel, nodes: list[str], s_net: dict[str, np.ndarray],
                     slack_node: str | None = None, v_slack: float = 1.04,
                     tol: float = 1e-8, max_iter: int = 100) -> SweepResult:
    """Solve for voltages given per-unit net complex loads (load minus generation).

    ``nodes`` is the energized set; it must be connected through parent edges
    to ``slack_node`` (defaults to the model root).
    """
    slack_node = slack_node or model.root
    live = set(nodes)
    if slack_node not in live:
        raise ValueError("slack node is not energized")
    order = [n for n in model.node_order if n in live]
    for n in order:
        if n != slack_node and model.parent_of(n) not in live:
            raise ValueError(f"node {n} is not connected to the slack")
    masks = {n: model.nodes[n].mask for n in order}
    s = {n: np.where(masks[n], np.asarray(s_net.get(n, np.zeros(3)), complex), 0) for n in order}
    v0 = v_slack * np.exp(1j * SLACK_ANGLES)
    v = {n: np.where(masks[n], v0, 0).astype(complex) for n in order}
    z = {}
    for n in order:
        if n != slack_node:
            e = model.edges[model.parent_edge[n]]
            z[n] = (e.r + 1j * e.x) * np.outer(e.mask, e.mask)
    children = {n: [] for n in order}
    for n in order:
        if n != slack_node:
            children[model.parent_of(n)].append(n)

    def currents(vv):
        cur = {}
        for n in reversed(order):
            m = masks[n]
            il = np.zeros(3, complex)
            il[m] = np.conj(s[n][m] / vv[n][m])
            for c in children[n]:
                il = il + cur[c]
            cur[n] = il
        return cur

    for it in range(1, max_iter + 1):
        cur = currents(v)
        dv = 0.0
        for n in order:
            if n == slack_node:
                continue
            par = model.parent_of(n)
            new = np.where(masks[n], v[par] - z[n] @ cur[n], 0)
            dv = max(dv, float(np.max(np.abs(new - v[n]))))
            v[n] = new
        if dv < tol:
            break
    else:
        raise PowerFlowDiverged(f"sweep did not converge in {max_iter} iterations (last dV {dv:.2e})")

    cur = currents(v)
    losses = np.zeros(3, complex)
    for n in order:
        if n != slack_node:
            losses += (z[n] @ cur[n]) * np.conj(cur[n])
    slack = s[slack_node].copy()
    for c in children[slack_node]:
        slack += v[slack_node] * np.conj(cur[c])
    load = sum((s[n] for n in order), np.zeros(3, complex))
    # the source covers the slack bus's own net load plus what leaves on its edges
    resid = float(np.sum(np.abs(slack - load - losses)))
    vout = {n: np.where(masks[n], v[n], np.nan) for n in order}
    return SweepResult(order, vout, slack, losses, it, resid)
