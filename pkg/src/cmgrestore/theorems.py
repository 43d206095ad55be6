"""Single-bus analytic model of receding-horizon scheduling under a uniform
load forecast error, with and without 1-delayed recourse.

At hour t the scheduler spreads the remaining stock X_{t-1} evenly over the
T - t + 1 remaining hours (capped by demand D).  The realized draw is
(1 + g) times the first-hour allocation; with recourse the allocation is
first reduced by g times the previous hour's allocation.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

GAMMA_GRID = (1.0, 5.0, 10.0, 20.0, 30.0)


@dataclass
class RecursionTrace:
    gamma: float
    recourse: bool
    plan_first: np.ndarray     # x^EDS_t(1), t = 1..T
    draw: np.ndarray           # x^RT_t
    stock: np.ndarray          # X_t after hour t, t = 1..T
    x_err: np.ndarray          # over-consumption bookkeeping up to t-1
    x_bal: np.ndarray          # stock planned for hours after t
    identity_residual: float   # max |X - past draws - current plan|
    exhaust_time: float | None  # fractional hour where X hits zero
    crossing_hour: int | None   # first t with bal < gX/(1+g) - err

    @property
    def end_balance(self) -> float:
        return float(self.stock[-1])


def simulate(total: float, demand: float, horizon: int, gamma_pct: float,
             recourse: bool = False) -> RecursionTrace:
    if horizon < 1 or total <= 0 or demand <= 0:
        raise ValueError("need horizon >= 1 and positive stock and demand")
    g = 0.01 * gamma_pct
    T = horizon
    a = np.zeros(T + 1)            # a[0] = 0 stands in for the hour before the outage
    draw = np.zeros(T)
    stock = np.zeros(T)
    bal = np.zeros(T)
    err = np.zeros(T)
    resid = 0.0
    x_prev = total
    exhaust = None
    for t in range(1, T + 1):
        a[t] = min(demand, max(x_prev, 0.0) / (T - t + 1))
        bal[t - 1] = (T - t) * a[t]
        if recourse:
            err[t - 1] = g * np.sum(a[1:t] - a[0:t - 1])
            draw[t - 1] = (1 + g) * (a[t] - g * a[t - 1])
        else:
            err[t - 1] = g * np.sum(a[1:t])
            draw[t - 1] = (1 + g) * a[t]
        x_now = x_prev - draw[t - 1]
        if exhaust is None and x_now < -1e-12 and draw[t - 1] > 0:
            exhaust = (t - 1) + x_prev / draw[t - 1]
        # receding-horizon bookkeeping: past draws plus the current plan
        # spend exactly X while the plan is not capped by demand
        if a[t] < demand:
            resid = max(resid, abs(total - draw[:t - 1].sum() - (T - t + 1) * a[t]))
        stock[t - 1] = x_now
        x_prev = x_now
    thr = g * total / (1 + g) - err
    hit = np.flatnonzero(bal < thr - 1e-9) + 1
    return RecursionTrace(gamma_pct, recourse, a[1:].copy(), draw, stock, err, bal, resid,
                          exhaust, int(hit[0]) if hit.size else None)


@dataclass
class TheoremReport:
    horizon: int
    total: float
    demand: float
    rows: list = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r["exhausts_ok"] and r["recourse_ok"] for r in self.rows)

    def lines(self) -> list[str]:
        out = [f"T={self.horizon} h  X={self.total:g} kWh  D={self.demand:g} kW  "
               f"(demand {self.demand * self.horizon:g} kWh > supply)"]
        for r in self.rows:
            te = "none" if r["exhaust_time"] is None else f"{r['exhaust_time']:.3f}"
            out.append(f"gamma={r['gamma']:5.1f}%  t'={te:>7}  crossing={r['crossing_hour']}  "
                       f"X_T(no rec)={r['end_no_recourse']:10.3f}  X_T(rec)={r['end_recourse']:10.3f}  "
                       f"exhaustion={'PASS' if r['exhausts_ok'] else 'FAIL'}  "
                       f"recourse={'PASS' if r['recourse_ok'] else 'FAIL'}")
        out.append(f"runtime {self.wall_time:.3f} s")
        return out


def verify_theorems(horizon: int = 48, total: float = 2400.0, demand: float = 100.0,
                    gammas=GAMMA_GRID) -> TheoremReport:
    """Run both recursions across the error grid.

    The exhaustion statement holds for a gamma when the no-recourse stock
    goes negative at some t' < T (gamma = 0 must not exhaust). The recourse
    statement holds when the recourse run ends with X_T >= 0.
    """
    if demand * horizon <= total:
        raise ValueError("the exhaustion statement needs demand to exceed supply")
    t0 = time.perf_counter()
    rep = TheoremReport(horizon, total, demand)
    for gm in gammas:
        nr = simulate(total, demand, horizon, gm, recourse=False)
        rc = simulate(total, demand, horizon, gm, recourse=True)
        if gm > 0:
            exhausts = nr.exhaust_time is not None and nr.exhaust_time < horizon
        else:
            exhausts = nr.exhaust_time is None
        covered = rc.end_balance >= -1e-9 and bool(np.all(rc.stock >= -1e-9))
        rep.rows.append(dict(gamma=float(gm), exhaust_time=nr.exhaust_time,
                             crossing_hour=nr.crossing_hour, end_no_recourse=nr.end_balance,
                             end_recourse=rc.end_balance, exhausts_ok=bool(exhausts), recourse_ok=bool(covered)))
    rep.wall_time = time.perf_counter() - t0
    return rep
