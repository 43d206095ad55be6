"""Branch and bound over LP relaxations.

Node selection is best-bound with ties broken by node id, branching picks the
most fractional binary (lowest index on ties). The LP relaxations go through
scipy's HiGHS interface to ``linprog``.
"""
from __future__ import annotations

import heapq
import time

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .program import MatrixForm

INT_TOL = 1e-6


def _lp(c, A, row_lb, row_ub, lb, ub):
    """Solve min c.x over row bounds and box. Returns (status, x, fun)."""
    fin_ub = np.isfinite(row_ub)
    fin_lb = np.isfinite(row_lb)
    eq = fin_ub & fin_lb & (row_ub == row_lb)
    le = fin_ub & ~eq
    ge = fin_lb & ~eq
    blocks, rhs = [], []
    if le.any():
        blocks.append(A[le])
        rhs.append(row_ub[le])
    if ge.any():
        blocks.append(-A[ge])
        rhs.append(-row_lb[ge])
    A_ub = sp.vstack(blocks).tocsr() if blocks else None
    b_ub = np.concatenate(rhs) if rhs else None
    A_eq = A[eq] if eq.any() else None
    b_eq = row_ub[eq] if eq.any() else None
    bounds = np.column_stack([lb, ub])
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds,
                  method="highs")
    if res.status == 0:
        return "optimal", res.x, float(res.fun)
    if res.status == 2:
        return "infeasible", None, np.inf
    if res.status == 3:
        return "unbounded", None, -np.inf
    return "error", None, np.inf


def branch_and_bound(mf: MatrixForm, time_limit: float = 60.0, gap: float = 1e-4,
                     max_nodes: int = 200000):
    """Minimise (or maximise) ``mf``. Returns (status, x, objective, info)."""
    t0 = time.perf_counter()
    sign = -1.0 if mf.maximize else 1.0
    c = sign * mf.c
    ints = np.flatnonzero(mf.integrality)

    incumbent = None
    inc_val = np.inf
    heap: list = []
    next_id = 0
    lb0, ub0 = mf.lb.copy(), mf.ub.copy()
    # integer bounds rounded inward
    lb0[ints] = np.ceil(lb0[ints] - INT_TOL)
    ub0[ints] = np.floor(ub0[ints] + INT_TOL)
    if np.any(lb0 > ub0):
        return "infeasible", None, np.nan, {"nodes": 0, "bound": np.inf}

    st, x, f = _lp(c, mf.A, mf.row_lb, mf.row_ub, lb0, ub0)
    if st == "infeasible":
        return "infeasible", None, np.nan, {"nodes": 1, "bound": np.inf}
    if st != "optimal":
        return st, None, np.nan, {"nodes": 1, "bound": -np.inf}
    heapq.heappush(heap, (f, next_id, lb0, ub0, x))
    next_id += 1
    nodes = 0
    timed_out = False
    best_bound = f

    while heap:
        bound, nid, lb, ub, x = heapq.heappop(heap)
        best_bound = bound
        if incumbent is not None and _gap_closed(inc_val, bound, gap):
            heap.clear()
            break
        if time.perf_counter() - t0 > time_limit or nodes >= max_nodes:
            timed_out = True
            heapq.heappush(heap, (bound, nid, lb, ub, x))
            break
        nodes += 1
        xi = x[ints]
        frac = np.abs(xi - np.round(xi))
        if frac.size == 0 or frac.max() <= INT_TOL:
            if bound < inc_val:
                inc_val, incumbent = bound, x.copy()
            continue
        # most fractional, lowest index on ties (argmax returns first)
        dist = np.minimum(xi - np.floor(xi), np.ceil(xi) - xi)
        j = ints[int(np.argmax(np.round(dist, 9)))]
        v = x[j]
        for side in (0, 1):
            nlb, nub = lb.copy(), ub.copy()
            if side == 0:
                nub[j] = np.floor(v)
            else:
                nlb[j] = np.ceil(v)
            if nlb[j] > nub[j]:
                continue
            st, cx, cf = _lp(c, mf.A, mf.row_lb, mf.row_ub, nlb, nub)
            if st != "optimal" or cf >= inc_val - 1e-12:
                continue
            heapq.heappush(heap, (cf, next_id, nlb, nub, cx))
            next_id += 1

    if heap:
        best_bound = min(best_bound, heap[0][0])
    elif incumbent is not None:
        best_bound = inc_val if not timed_out else best_bound
    info = {"nodes": nodes, "bound": sign * best_bound}
    if incumbent is None:
        if timed_out:
            return "time_limit", None, np.nan, info
        return "infeasible", None, np.nan, info
    obj = sign * inc_val + mf.c0
    if timed_out and not _gap_closed(inc_val, best_bound, gap):
        return "feasible", incumbent, obj, info
    return "optimal", incumbent, obj, info


def _gap_closed(inc: float, bound: float, gap: float) -> bool:
    return inc - bound <= gap * max(1.0, abs(inc))
