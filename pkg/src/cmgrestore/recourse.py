"""Delayed recourse: forecast-error impact on the grid-forming storage, its
linear trend, and the load-cap term handed to the hourly NRT problem."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def compute_fe_impact(nrt_expected_soc_end: float, realized_soc_end: float, e_kwh: float) -> float:
    """kWh of over (+) or under (-) consumption seen by the grid-forming unit."""
    for v in (nrt_expected_soc_end, realized_soc_end):
        if not -1e-9 <= v <= 100 + 1e-9:
            raise ValueError(f"SOC {v} outside [0, 100]")
    return (nrt_expected_soc_end - realized_soc_end) / 100.0 * e_kwh


@dataclass
class FeHistory:
    """Raw hourly impacts in kWh, oldest first."""

    e_max: float
    raw: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.e_max <= 0:
            raise ValueError("E_max must be positive")

    def append(self, kwh: float) -> None:
        self.raw.append(float(kwh))

    @property
    def scaled(self) -> np.ndarray:
        return np.clip(np.asarray(self.raw, float) / self.e_max, -1.0, 1.0)

    def __len__(self):
        return len(self.raw)


@dataclass(frozen=True)
class RecourseTerm:
    p_fe_prev: float = 0.0   # kWh, last hour
    slope: float = 0.0       # dimensionless, in [-1, 1]
    a_kwh: float = 0.0       # unscaled extrapolation A = slope * E_max
    scaled_prev: float = 0.0

    @property
    def reduction(self) -> float:
        return self.p_fe_prev + self.a_kwh

    def as_dict(self) -> dict:
        return {"p_fe_prev": self.p_fe_prev, "scaled_prev": self.scaled_prev,
                "a": self.slope, "A": self.a_kwh}


ZERO_TERM = RecourseTerm()


def fit_trend(history: FeHistory | np.ndarray, n: int, zero_intercept: bool = False) -> float:
    """OLS slope of the last ``n`` scaled values against t = 1..n.

    Shorter histories are left-padded with zeros. The slope is clamped to
    [-1, 1]: on the fixed design with inputs in [-1, 1] it can exceed 1 only
    for n = 2 (a jump from -1 to 1).
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    y = history.scaled if isinstance(history, FeHistory) else np.clip(np.asarray(history, float), -1, 1)
    y = y[-n:]
    if y.size < n:
        y = np.concatenate([np.zeros(n - y.size), y])
    t = np.arange(1, n + 1, dtype=float)
    if zero_intercept:
        a = float(t @ y / (t @ t))
    else:
        tc = t - t.mean()
        a = float(tc @ (y - y.mean()) / (tc @ tc))
    return float(np.clip(a, -1.0, 1.0))


def recourse_term(history: FeHistory, n: int, e_max: float | None = None,
                  zero_intercept: bool = False) -> RecourseTerm:
    if len(history) == 0:
        return ZERO_TERM
    e_max = history.e_max if e_max is None else e_max
    a = fit_trend(history, n, zero_intercept)
    return RecourseTerm(p_fe_prev=history.raw[-1], slope=a, a_kwh=a * e_max,
                        scaled_prev=float(history.scaled[-1]))
