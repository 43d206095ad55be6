"""Demand-side helpers for the hourly stage: cold-load pickup, service
duration equity weights and the minimum-service-duration pin set."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .grid import NetworkModel


def clpu_multiplier(hours_disconnected: float, k: float = 0.5, lam: float = 0.3) -> float:
    if hours_disconnected < 0:
        raise ValueError("hours_disconnected must be >= 0")
    return 1.0 + k * (1.0 - np.exp(-lam * hours_disconnected))


def estimate_clpu(p_kw: np.ndarray, q_kvar: np.ndarray, hours_disconnected: float,
                  k: float = 0.5, lam: float = 0.3, hours_since_pickup: int = 0):
    """Extra (P, Q) a node draws when picked up after an interruption.

    The surge applies to the whole first reconnected hour and is gone after.
    """
    if hours_since_pickup > 0:
        return np.zeros_like(p_kw, dtype=float), np.zeros_like(q_kvar, dtype=float)
    m = clpu_multiplier(hours_disconnected, k, lam) - 1.0
    return m * np.asarray(p_kw, float), m * np.asarray(q_kvar, float)


def zone_keys(model: NetworkModel) -> list[tuple[str, int]]:
    """(zone, phase) pairs that carry a DR switch variable."""
    keys = set()
    for n in model.load_nodes():
        for ph in np.flatnonzero(n.mask & (n.p_kw > 0)):
            keys.add((n.dr_zone, int(ph)))
    return sorted(keys)


@dataclass
class EquityTracker:
    """Rolling record of hourly connectivity (0..1 per node) for NCL nodes."""

    window: int = 24
    kappa: float = 0.5
    history: dict[str, deque] = field(default_factory=dict)
    omega1: dict[str, float] = field(default_factory=dict)
    classes: dict[str, str] = field(default_factory=dict)
    enabled: bool = True

    @classmethod
    def for_model(cls, model: NetworkModel, window: int = 24, kappa: float = 0.5,
                  enabled: bool = True) -> "EquityTracker":
        if window < 1:
            raise ValueError("equity window must be >= 1")
        tr = cls(window=window, kappa=kappa, enabled=enabled)
        for n in model.load_nodes():
            tr.history[n.id] = deque(maxlen=window)
            tr.omega1[n.id] = n.omega1
            tr.classes[n.id] = n.load_class
        cl = [w for i, w in tr.omega1.items() if tr.classes[i] == "CL"]
        ncl = [w for i, w in tr.omega1.items() if tr.classes[i] == "NCL"]
        if enabled and cl and ncl and max(ncl) * (1 + kappa) >= min(cl):
            raise ValueError("equity boost would lift an NCL weight above a CL weight")
        return tr

    def served_hours(self, node: str) -> float:
        return float(sum(self.history[node]))

    def omega2(self) -> dict[str, float]:
        out = {}
        for n, h in self.history.items():
            if self.classes[n] == "CL" or not self.enabled:
                out[n] = 1.0
            else:
                out[n] = 1.0 + self.kappa * (1.0 - sum(h) / self.window)
        return out


def update_equity(tracker: EquityTracker, last_hour: dict[str, float]) -> dict[str, float]:
    """Append one hour of connectivity (share of the node's phases on) and
    return the refreshed weights."""
    for n, h in tracker.history.items():
        h.append(float(np.clip(last_hour.get(n, 0.0), 0.0, 1.0)))
    return tracker.omega2()


@dataclass
class MsdSet:
    """Run lengths of consecutive connected hours per (zone, phase)."""

    upsilon: int = 2
    runs: dict[tuple[str, int], int] = field(default_factory=dict)

    def update(self, connected: dict[tuple[str, int], int]) -> None:
        for key, on in connected.items():
            self.runs[key] = self.runs.get(key, 0) + 1 if on else 0

    @property
    def pinned(self) -> set[tuple[str, int]]:
        """Connected last hour but not yet for the full minimum duration."""
        return {k for k, r in self.runs.items() if 0 < r < self.upsilon}
