"""Linear stand-ins for the nonlinear pieces of the stage programs.

* ``add_hexagon``: polygonal inner/outer relaxation of an apparent power
  circle ``P^2 + Q^2 <= S^2`` scaled by an exactness coefficient tau.
* ``add_chance_indicator``: big-M scenario indicators whose probability
  weighted sum approximates the probability that a constraint holds.
* ``add_squared_deviation``: convex piecewise-linear epigraph of
  ``weight * (expr - target)^2`` built from chords between knots.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .program import BINARY, LinExpr, Program, ProgramError, PwlPart, Var

SQ3 = np.sqrt(3.0)

# row label -> (a, b, sense, rhs scale) for a*P + b*Q (sense) scale*tau*S,
# and the quadrants in which the row is active.
HEX_ROWS = {
    "b_up": (SQ3, 1.0, "<=", SQ3, (1,)),
    "b_lo": (SQ3, 1.0, ">=", -SQ3, (3,)),
    "d_up": (-SQ3, 1.0, "<=", SQ3, (2,)),
    "d_lo": (-SQ3, 1.0, ">=", -SQ3, (4,)),
    "c_up": (0.0, 1.0, "<=", SQ3 / 2, (1, 2)),
    "c_lo": (0.0, 1.0, ">=", -SQ3 / 2, (3, 4)),
    "e_up": (1.0, 0.0, "<=", SQ3 / 2, (1, 4)),
    "e_lo": (1.0, 0.0, ">=", -SQ3 / 2, (2, 3)),
}

ALL_QUADRANTS = (1, 2, 3, 4)


def hexagon_rows(quadrants: Iterable[int] = ALL_QUADRANTS) -> list[str]:
    qs = set(quadrants)
    bad = qs - set(ALL_QUADRANTS)
    if bad:
        raise ProgramError(f"unknown quadrants {sorted(bad)}")
    return [k for k, row in HEX_ROWS.items() if qs.intersection(row[4])]


def add_hexagon(prog: Program, P, Q, S: float, tau: float = 1.1,
                quadrants: Iterable[int] = ALL_QUADRANTS, name: str = "hex") -> list[int]:
    """Add the linear apparent-power rows active in ``quadrants``."""
    if S <= 0:
        raise ProgramError("hexagon rating must be positive")
    if tau < 1:
        raise ProgramError("tau must be >= 1")
    ids = []
    P, Q = LinExpr.of(P), LinExpr.of(Q)
    for key in hexagon_rows(quadrants):
        a, b, sense, k, _ = HEX_ROWS[key]
        lhs = P * a + Q * b
        ids.append(prog.add_constraint(lhs, sense, k * tau * S, f"{name}.{key}"))
    return ids


def hexagon_feasible(p: np.ndarray, q: np.ndarray, S: float, tau: float = 1.1,
                     quadrants: Iterable[int] = ALL_QUADRANTS, tol: float = 0.0) -> np.ndarray:
    """Vectorised membership test mirroring ``add_hexagon``."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    ok = np.ones(np.broadcast(p, q).shape, dtype=bool)
    for key in hexagon_rows(quadrants):
        a, b, sense, k, _ = HEX_ROWS[key]
        v = a * p + b * q
        lim = k * tau * S
        ok &= (v <= lim + tol) if sense == "<=" else (v >= lim - tol)
    return ok


def add_chance_indicator(prog: Program, lhs: Sequence, rhs: Sequence,
                         probabilities: Sequence[float], big_m, name: str = "cc"):
    """Scenario indicators z_s with ``lhs_s >= rhs_s - M_s (1 - z_s)``.

    Returns ``(phi, z)`` where ``phi = sum_s pi_s z_s``.
    """
    S = len(lhs)
    if S < 1 or len(rhs) != S or len(probabilities) != S:
        raise ProgramError("chance indicator needs matching, nonempty scenario lists")
    M = np.broadcast_to(np.asarray(big_m, dtype=float), (S,))
    if np.any(M <= 0):
        raise ProgramError("big-M must be positive")
    z: list[Var] = []
    phi = LinExpr()
    for s in range(S):
        zs = prog.add_var(f"{name}.z[{s}]", 0, 1, BINARY)
        z.append(zs)
        row = LinExpr.of(lhs[s]) - LinExpr.of(rhs[s]) - M[s] * zs
        prog.ge(row, -M[s], f"{name}.ind[{s}]")
        phi.iadd(zs, float(probabilities[s]))
    return phi, z


def add_chance_gate(prog: Program, phi, theta, eps: float, name: str = "cc.gate") -> int:
    """``-phi <= -(1 - eps) + 1 - theta``, i.e. ``theta <= phi + eps``."""
    return prog.le(-LinExpr.of(phi), -(1.0 - eps) + 1.0 - LinExpr.of(theta), name)


def symmetric_knots(half_range: float, count: int = 17) -> np.ndarray:
    if count < 3:
        raise ProgramError("need at least 3 knots")
    return np.linspace(-half_range, half_range, count)


def add_squared_deviation(prog: Program, expr, target: float, weight: float,
                          breakpoints, name: str = "sq") -> PwlPart:
    """PWL epigraph of ``weight * (expr - target)^2`` with knots given as
    offsets from ``target``. The part enters the objective with the sign that
    penalises deviation under the program's sense."""
    k = np.asarray(breakpoints, dtype=float)
    if k.size < 3:
        raise ProgramError("need at least 3 breakpoints")
    if np.any(np.diff(k) <= 0):
        raise ProgramError("breakpoints must be strictly increasing")
    if not np.allclose(k, -k[::-1], atol=1e-12 * max(1.0, np.abs(k).max())):
        raise ProgramError("breakpoints must be symmetric about the target")
    if weight < 0:
        raise ProgramError("weight must be nonnegative")
    d = LinExpr.of(expr) - float(target)
    e = prog.add_var(f"{name}.epi", 0.0, np.inf)
    for j in range(k.size - 1):
        a, b = k[j], k[j + 1]
        # chord of d^2 through (a, a^2) and (b, b^2)
        prog.ge(LinExpr.of(e) - d * (a + b), -a * b, f"{name}.seg[{j}]")
    prog.add_objective(e, weight if prog.sense == "min" else -weight)
    part = PwlPart(name=name, epigraph=e, knots=k, weight=float(weight),
                   max_error=float(weight * np.max(np.diff(k)) ** 2 / 4.0))
    prog.pwl_parts.append(part)
    return part


def pwl_value(part: PwlPart, dev: float) -> float:
    """Value of the chord interpolant (extended linearly outside the knots)."""
    k = part.knots
    vals = [(a + b) * dev - a * b for a, b in zip(k[:-1], k[1:])]
    return part.weight * max(0.0, max(vals))
