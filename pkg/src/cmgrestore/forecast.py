"""Load and PV profiles at the three timescales, EDS scenario sets and
controlled forecast error (uniform bias FE1, random error at a target MAPE FE2).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .grid import PHASES, NetworkModel

log = logging.getLogger(__name__)

RESOLUTIONS = (60, 15, 5)


@dataclass
class Profile:
    """Per node/phase load (kW, kVAr) and per PV unit availability (kW).

    ``p`` and ``q`` have shape (steps, nodes, 3); ``pv`` has shape (steps, units).
    """

    start_hour: float
    resolution_min: int
    node_ids: list[str]
    unit_ids: list[str]
    p: np.ndarray
    q: np.ndarray
    pv: np.ndarray
    pv_rating: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.resolution_min not in RESOLUTIONS:
            raise ValueError(f"resolution must be one of {RESOLUTIONS}")
        if self.p.shape != self.q.shape or self.p.shape[0] != self.pv.shape[0]:
            raise ValueError("profile arrays have inconsistent shapes")
        if self.pv_rating.size == 0:
            self.pv_rating = np.full(len(self.unit_ids), np.inf)

    @property
    def steps(self) -> int:
        return self.p.shape[0]

    @property
    def hours(self) -> float:
        return self.steps * self.resolution_min / 60.0

    @property
    def per_hour(self) -> int:
        return 60 // self.resolution_min

    def check(self) -> None:
        if np.any(self.p < 0) or np.any(self.q < 0) or np.any(self.pv < 0):
            raise ValueError("profile has negative entries")
        if np.any(self.pv > self.pv_rating[None, :] + 1e-9):
            raise ValueError("PV availability above unit rating")

    def window(self, start: int, n: int) -> "Profile":
        sl = slice(start, start + n)
        return replace(self, start_hour=self.start_hour + start * self.resolution_min / 60,
                       p=self.p[sl], q=self.q[sl], pv=self.pv[sl])

    def coarsen(self, resolution_min: int) -> "Profile":
        """Block-average to a coarser resolution (keeps energy)."""
        f = resolution_min // self.resolution_min
        if f * self.resolution_min != resolution_min or f < 1:
            raise ValueError("can only coarsen to an integer multiple")
        n = self.steps // f

        def agg(a):
            return a[: n * f].reshape((n, f) + a.shape[1:]).mean(axis=1)

        return replace(self, resolution_min=resolution_min, p=agg(self.p), q=agg(self.q),
                       pv=agg(self.pv))

    def refine(self, resolution_min: int) -> "Profile":
        """Hold each value across the finer steps."""
        f = self.resolution_min // resolution_min
        if f * resolution_min != self.resolution_min or f < 1:
            raise ValueError("can only refine by an integer factor")
        return replace(self, resolution_min=resolution_min, p=np.repeat(self.p, f, axis=0),
                       q=np.repeat(self.q, f, axis=0), pv=np.repeat(self.pv, f, axis=0))


@dataclass
class ScenarioSet:
    scenarios: list[Profile]
    probabilities: np.ndarray

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=float)
        if len(self.scenarios) != self.probabilities.size or not self.scenarios:
            raise ValueError("need one probability per scenario")
        if abs(self.probabilities.sum() - 1.0) > 1e-9:
            raise ValueError("scenario probabilities must sum to 1")

    def __len__(self):
        return len(self.scenarios)

    def window(self, start: int, n: int) -> "ScenarioSet":
        return ScenarioSet([s.window(start, n) for s in self.scenarios], self.probabilities)

    def expected(self) -> Profile:
        w = self.probabilities
        s0 = self.scenarios[0]
        return replace(s0, p=sum(wi * s.p for wi, s in zip(w, self.scenarios)),
                       q=sum(wi * s.q for wi, s in zip(w, self.scenarios)),
                       pv=sum(wi * s.pv for wi, s in zip(w, self.scenarios)))


@dataclass(frozen=True)
class ErrorModel:
    """Multiplicative mean-one lognormal scenario noise (``zero`` disables it)."""

    kind: str = "lognormal"
    sigma_load: float = 0.08
    sigma_pv: float = 0.15


@dataclass(frozen=True)
class ErrorCase:
    kind: str = "none"   # none | FE1 | FE2
    magnitude: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "FE1", "FE2"):
            raise ValueError(f"unknown error case {self.kind!r}")
        if self.kind == "FE1" and not -30 <= self.magnitude <= 30:
            raise ValueError("FE1 bias must lie in [-30, 30] percent")
        if self.kind == "FE2" and not 0 < self.magnitude <= 30:
            raise ValueError("FE2 target MAPE must lie in (0, 30] percent")


class MapeUnreachable(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# synthetic shapes

def _raw_load_shape(h: np.ndarray) -> np.ndarray:
    def bump(c, w):
        d = np.minimum(np.abs(h - c), 24 - np.abs(h - c))
        return np.exp(-0.5 * (d / w) ** 2)

    return 0.48 + 0.16 * bump(8.0, 1.8) + 0.50 * bump(19.0, 3.0)


_LOAD_PEAK = float(_raw_load_shape(np.linspace(0, 24, 2881)).max())


def load_shape(hour_of_day: np.ndarray) -> np.ndarray:
    """Summer residential shape, peak 1 near 19 h, night trough near 0.5."""
    return _raw_load_shape(np.asarray(hour_of_day, float) % 24) / _LOAD_PEAK


def pv_shape(hour_of_day: np.ndarray, sunrise: float = 6.0, sunset: float = 20.0) -> np.ndarray:
    h = np.asarray(hour_of_day, float) % 24
    x = (h - sunrise) / (sunset - sunrise)
    return np.where((x > 0) & (x < 1), np.sin(np.pi * np.clip(x, 0, 1)) ** 1.3, 0.0)


def synthetic_forecast(model: NetworkModel, start_hour: float, hours: int,
                       resolution_min: int = 5, load_scale: float = 1.0,
                       pv_scale: float = 1.0, pv_clear: float = 0.9) -> Profile:
    """Smooth base forecast evaluated at interval midpoints."""
    n = int(round(hours * 60 / resolution_min))
    t = start_hour + (np.arange(n) + 0.5) * resolution_min / 60.0
    nodes = model.node_order
    units = [g.id for g in model.gens(("PV-C", "PV-UC"))]
    p = np.zeros((n, len(nodes), 3))
    q = np.zeros_like(p)
    for i, nid in enumerate(nodes):
        nd = model.nodes[nid]
        if not nd.has_load:
            continue
        # small deterministic per-node phase shift so nodes are not identical
        shift = ((i * 7) % 5 - 2) * 0.25
        s = load_shape(t + shift) * load_scale
        p[:, i, :] = s[:, None] * nd.p_kw[None, :]
        q[:, i, :] = s[:, None] * nd.q_kvar[None, :]
    rating = np.array([model.generators[u].s_kva for u in units]) * pv_scale
    pv = pv_shape(t)[:, None] * pv_clear * rating[None, :]
    return Profile(start_hour=start_hour, resolution_min=resolution_min, node_ids=list(nodes),
                   unit_ids=units, p=p, q=q, pv=pv, pv_rating=rating)


# ---------------------------------------------------------------------------
# scenarios and error injection

def sample_scenarios(base: Profile, error_model: ErrorModel, count: int, seed: int) -> ScenarioSet:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        if error_model.kind == "zero":
            out.append(replace(base, p=base.p.copy(), q=base.q.copy(), pv=base.pv.copy()))
            continue
        if error_model.kind != "lognormal":
            raise ValueError(f"unknown error model {error_model.kind!r}")
        sl, sp = error_model.sigma_load, error_model.sigma_pv
        zl = rng.standard_normal(base.p.shape)
        zp = rng.standard_normal(base.pv.shape)
        ml = np.exp(sl * zl - 0.5 * sl ** 2)
        mp = np.exp(sp * zp - 0.5 * sp ** 2)
        pv = np.minimum(np.maximum(base.pv * mp, 0.0), base.pv_rating[None, :])
        out.append(replace(base, p=np.maximum(base.p * ml, 0.0), q=np.maximum(base.q * ml, 0.0),
                           pv=pv))
    return ScenarioSet(out, np.full(count, 1.0 / count))


def mape(forecast, actual, return_excluded: bool = False):
    """100 * mean(|f - a| / a) over entries with a > 0."""
    f = forecast.p if isinstance(forecast, Profile) else np.asarray(forecast, float)
    a = actual.p if isinstance(actual, Profile) else np.asarray(actual, float)
    if f.shape != a.shape:
        raise ValueError("forecast and actual shapes differ")
    ok = a > 0
    excluded = int(a.size - ok.sum())
    if excluded:
        log.debug("mape: %d zero-actual entries excluded", excluded)
    val = float(100.0 * np.mean(np.abs(f[ok] - a[ok]) / a[ok])) if ok.any() else 0.0
    return (val, excluded) if return_excluded else val


def _held_noise(rng, shape, per_hour: int) -> np.ndarray:
    """Standard normal noise held constant within each hour."""
    steps = shape[0]
    hrs = -(-steps // per_hour)
    z = rng.standard_normal((hrs,) + shape[1:])
    return np.repeat(z, per_hour, axis=0)[:steps]


def _fit_scale(base: np.ndarray, z: np.ndarray, target: float, cap=None) -> np.ndarray:
    mask = base > 0
    if not mask.any():
        return base.copy()

    def real(c):
        r = base * np.exp(c * z)
        if cap is not None:
            r = np.minimum(r, cap)
        return r

    def gap(c):
        return mape(base[mask], real(c)[mask]) - target

    hi = 0.05
    while gap(hi) < 0 and hi < 20:
        hi *= 2
    if gap(hi) < -0.5:
        raise MapeUnreachable(f"target MAPE {target}% unreachable (max {gap(hi) + target:.2f}%)")
    c = brentq(gap, 0.0, hi, xtol=1e-10)
    out = real(c)
    got = mape(base[mask], out[mask])
    if abs(got - target) > 0.5:
        raise MapeUnreachable(f"achieved MAPE {got:.2f}% misses target {target}%")
    return out


def inject_error(base: Profile, case: ErrorCase, seed: int) -> Profile:
    """Realization from a forecast. FE1 divides by (1 + bias/100) so the signed
    error of the forecast against the realization equals the bias; FE2 applies
    hour-held lognormal perturbations scaled to the target MAPE."""
    if case.kind == "none" or (case.kind == "FE1" and case.magnitude == 0):
        return replace(base, p=base.p.copy(), q=base.q.copy(), pv=base.pv.copy())
    if case.kind == "FE1":
        k = 1.0 / (1.0 + 0.01 * case.magnitude)
        return replace(base, p=base.p * k, q=base.q * k,
                       pv=np.minimum(base.pv * k, base.pv_rating[None, :]))
    rng = np.random.default_rng(seed)
    zl = _held_noise(rng, base.p.shape, base.per_hour)
    zp = _held_noise(rng, base.pv.shape, base.per_hour)
    p = _fit_scale(base.p, zl, case.magnitude)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(base.p > 0, p / np.where(base.p > 0, base.p, 1.0), 1.0)
    q = base.q * ratio
    pv = _fit_scale(base.pv, zp, case.magnitude, cap=base.pv_rating[None, :])
    return replace(base, p=p, q=q, pv=pv)


def blend(base: Profile, realized: Profile, weight: float) -> Profile:
    """Forecast moved ``weight`` of the way from ``base`` toward ``realized``."""
    if not 0 <= weight <= 1:
        raise ValueError("blend weight must lie in [0, 1]")
    return replace(base, p=base.p + weight * (realized.p - base.p),
                   q=base.q + weight * (realized.q - base.q),
                   pv=base.pv + weight * (realized.pv - base.pv))


# ---------------------------------------------------------------------------
# CSV exchange

CSV_HEADER = ["timestamp", "node_id", "phase", "p_kw", "q_kvar"]


def write_profile_csv(profile: Profile, path: str | Path) -> None:
    """Rows per step and node phase; PV units appear as ``pv:<id>`` with phase ``-``.
    The timestamp column holds hours since the profile origin."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        dt = profile.resolution_min / 60.0
        for k in range(profile.steps):
            ts = f"{profile.start_hour + k * dt:.6f}"
            for i, nid in enumerate(profile.node_ids):
                for j, ph in enumerate(PHASES):
                    if profile.p[k, i, j] or profile.q[k, i, j]:
                        w.writerow([ts, nid, ph, repr(float(profile.p[k, i, j])),
                                    repr(float(profile.q[k, i, j]))])
            for u, uid in enumerate(profile.unit_ids):
                w.writerow([ts, f"pv:{uid}", "-", repr(float(profile.pv[k, u])), "0.0"])


def read_profile_csv(path: str | Path, like: Profile) -> Profile:
    """Read rows written by :func:`write_profile_csv` onto the layout of ``like``."""
    ni = {n: i for i, n in enumerate(like.node_ids)}
    ui = {u: i for i, u in enumerate(like.unit_ids)}
    rows = list(csv.DictReader(open(path, newline="")))
    if rows and list(rows[0].keys()) != CSV_HEADER:
        raise ValueError("unexpected profile CSV header")
    stamps = sorted({float(r["timestamp"]) for r in rows})
    si = {s: k for k, s in enumerate(stamps)}
    p = np.zeros((len(stamps), len(ni), 3))
    q = np.zeros_like(p)
    pv = np.zeros((len(stamps), len(ui)))
    for r in rows:
        k = si[float(r["timestamp"])]
        if r["node_id"].startswith("pv:"):
            pv[k, ui[r["node_id"][3:]]] = float(r["p_kw"])
        else:
            j = PHASES.index(r["phase"])
            p[k, ni[r["node_id"]], j] = float(r["p_kw"])
            q[k, ni[r["node_id"]], j] = float(r["q_kvar"])
    start = stamps[0] if stamps else like.start_hour
    return replace(like, start_hour=start, p=p, q=q, pv=pv)
