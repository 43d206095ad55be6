"""Solver front end: backend registry, solution polishing, infeasibility hints."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.optimize import Bounds, LinearConstraint, milp

from .bnb import INT_TOL, branch_and_bound
from .program import LinExpr, MatrixForm, Program, Var, matrix_residual

# backend(mf, time_limit, gap) -> (status, x | None, objective, info dict)
Backend = Callable[[MatrixForm, float, float], tuple]
_BACKENDS: dict[str, Backend] = {}

DEFAULT_GAP = 1e-4


def register_backend(name: str, fn: Backend) -> None:
    _BACKENDS[name] = fn


def backends() -> list[str]:
    return sorted(_BACKENDS)


def _highs_milp(mf: MatrixForm, time_limit: float, gap: float):
    sign = -1.0 if mf.maximize else 1.0
    cons = [LinearConstraint(mf.A, mf.row_lb, mf.row_ub)] if mf.A.shape[0] else []
    res = milp(sign * mf.c, constraints=cons, integrality=mf.integrality,
               bounds=Bounds(mf.lb, mf.ub),
               options={"time_limit": float(time_limit), "mip_rel_gap": float(gap),
                        "presolve": True})
    info = {"message": res.message}
    if res.x is None:
        if res.status == 1:
            return "time_limit", None, np.nan, info
        return "infeasible", None, np.nan, info
    obj = float(mf.c @ res.x) + mf.c0
    if res.status == 0:
        return "optimal", res.x, obj, info
    return "feasible", res.x, obj, info


register_backend("bnb", branch_and_bound)
register_backend("highs", _highs_milp)


@dataclass
class Solution:
    status: str
    x: np.ndarray | None
    objective: float
    wall_time: float
    residual: float = np.nan
    backend: str = "bnb"
    iis_hint: list[str] = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible") and self.x is not None

    def __getitem__(self, v) -> float:
        if isinstance(v, Var):
            return float(self.x[v.index])
        return float(LinExpr.of(v).value(self.x))

    def values(self, vs) -> np.ndarray:
        return np.array([self.x[v.index] for v in vs])


def _polish(mf: MatrixForm, x: np.ndarray) -> np.ndarray:
    """Snap binaries and re-solve the continuous part with binaries fixed."""
    ints = np.flatnonzero(mf.integrality)
    x = x.copy()
    x[ints] = np.round(x[ints])
    if ints.size == 0 or ints.size == x.size:
        return x
    lb, ub = mf.lb.copy(), mf.ub.copy()
    lb[ints] = ub[ints] = x[ints]
    sign = -1.0 if mf.maximize else 1.0
    cons = [LinearConstraint(mf.A, mf.row_lb, mf.row_ub)] if mf.A.shape[0] else []
    res = milp(sign * mf.c, constraints=cons, bounds=Bounds(lb, ub))
    if res.x is not None and res.status == 0:
        y = res.x
        y[ints] = x[ints]
        return y
    return x


def solve(prog: Program, time_limit: float = 60.0, gap: float = DEFAULT_GAP,
          backend: str = "bnb", iis: bool = True) -> Solution:
    if backend not in _BACKENDS:
        raise KeyError(f"unknown backend {backend!r}; have {backends()}")
    mf = prog.to_matrix()
    t0 = time.perf_counter()
    status, x, obj, info = _BACKENDS[backend](mf, time_limit, gap)
    if x is not None:
        x = _polish(mf, np.asarray(x, dtype=float))
        obj = float(mf.c @ x) + mf.c0
    wall = time.perf_counter() - t0
    sol = Solution(status=status, x=x, objective=obj, wall_time=wall, backend=backend, info=info)
    if x is not None:
        sol.residual = matrix_residual(mf, x)
        ints = np.flatnonzero(mf.integrality)
        assert np.all(np.abs(x[ints] - np.round(x[ints])) <= INT_TOL)
    elif status == "infeasible" and iis:
        sol.iis_hint = infeasibility_hint(prog, mf)
    return sol


def _feasible(mf: MatrixForm, rows: np.ndarray) -> bool:
    cons = [LinearConstraint(mf.A[rows], mf.row_lb[rows], mf.row_ub[rows])] if rows.size else []
    res = milp(np.zeros(mf.c.size), constraints=cons, integrality=mf.integrality,
               bounds=Bounds(mf.lb, mf.ub), options={"time_limit": 10.0})
    return res.x is not None


def infeasibility_hint(prog: Program, mf: MatrixForm | None = None,
                       filter_limit: int = 150) -> list[str]:
    """Names of a small infeasible row subset.

    An elastic program (one nonnegative slack pair per row, minimise the slack
    total) flags the rows that cannot all hold. On small programs a deletion
    filter then shrinks the full row set to an irreducible one. Variable
    bounds are treated as hard.
    """
    mf = mf or prog.to_matrix()
    m, n = mf.A.shape
    if m == 0:
        return []
    if m <= filter_limit:
        keep = np.ones(m, dtype=bool)
        if _feasible(mf, np.arange(m)):
            return []
        for r in range(m):
            keep[r] = False
            if _feasible(mf, np.flatnonzero(keep)):
                keep[r] = True
        return [prog.row_names[r] for r in np.flatnonzero(keep)]
    eye = sp.identity(m, format="csr")
    A = sp.hstack([mf.A, eye, -eye]).tocsr()
    c = np.concatenate([np.zeros(n), np.ones(2 * m)])
    lb = np.concatenate([mf.lb, np.zeros(2 * m)])
    ub = np.concatenate([mf.ub, np.full(2 * m, np.inf)])
    integ = np.concatenate([mf.integrality, np.zeros(2 * m, dtype=np.int8)])
    res = milp(c, constraints=[LinearConstraint(A, mf.row_lb, mf.row_ub)], integrality=integ,
               bounds=Bounds(lb, ub), options={"time_limit": 30.0})
    if res.x is None:
        return []
    slack = res.x[n:n + m] + res.x[n + m:]
    return [prog.row_names[r] for r in np.flatnonzero(slack > 1e-7)]
