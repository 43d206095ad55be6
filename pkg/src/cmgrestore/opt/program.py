"""Mathematical program container: variables, linear rows, linear objective.

Programs are built incrementally by the stage builders and handed to a
solver backend as a sparse matrix form.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

CONTINUOUS = "continuous"
BINARY = "binary"


class ProgramError(ValueError):
    pass


class LinExpr:
    """Sparse affine expression ``sum(coef * var) + const``."""

    __slots__ = ("terms", "const")

    def __init__(self, terms: dict[int, float] | None = None, const: float = 0.0):
        self.terms = dict(terms) if terms else {}
        self.const = float(const)

    @staticmethod
    def of(value) -> "LinExpr":
        if isinstance(value, LinExpr):
            return value
        if isinstance(value, Var):
            return LinExpr({value.index: 1.0})
        return LinExpr(const=float(value))

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.const)

    def add_term(self, index: int, coef: float) -> "LinExpr":
        if coef != 0.0:
            self.terms[index] = self.terms.get(index, 0.0) + coef
        return self

    def iadd(self, other, scale: float = 1.0) -> "LinExpr":
        """In-place ``self += scale * other`` (fast path for builders)."""
        if isinstance(other, Var):
            self.terms[other.index] = self.terms.get(other.index, 0.0) + scale
        elif isinstance(other, LinExpr):
            for k, v in other.terms.items():
                self.terms[k] = self.terms.get(k, 0.0) + scale * v
            self.const += scale * other.const
        else:
            self.const += scale * float(other)
        return self

    def __add__(self, other):
        return self.copy().iadd(other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.copy().iadd(other, -1.0)

    def __rsub__(self, other):
        return LinExpr.of(other).copy().iadd(self, -1.0)

    def __mul__(self, k):
        k = float(k)
        return LinExpr({i: k * v for i, v in self.terms.items()}, k * self.const)

    __rmul__ = __mul__

    def __truediv__(self, k):
        return self * (1.0 / float(k))

    def __neg__(self):
        return self * -1.0

    def value(self, x: np.ndarray) -> float:
        return self.const + sum(v * x[i] for i, v in self.terms.items())

    def __repr__(self):
        body = " + ".join(f"{v:g}*x{i}" for i, v in self.terms.items())
        return f"LinExpr({body} + {self.const:g})"


class Var:
    __slots__ = ("index", "name")

    def __init__(self, index: int, name: str):
        self.index = index
        self.name = name

    def _e(self):
        return LinExpr({self.index: 1.0})

    def __add__(self, o):
        return self._e() + o

    __radd__ = __add__

    def __sub__(self, o):
        return self._e() - o

    def __rsub__(self, o):
        return LinExpr.of(o) - self._e()

    def __mul__(self, k):
        return LinExpr({self.index: float(k)})

    __rmul__ = __mul__

    def __neg__(self):
        return LinExpr({self.index: -1.0})

    def __repr__(self):
        return f"Var({self.name})"


def lsum(items: Iterable) -> LinExpr:
    out = LinExpr()
    for it in items:
        out.iadd(it)
    return out


@dataclass
class PwlPart:
    """Convex piecewise-linear objective part ``weight * f(expr - target)``."""

    name: str
    epigraph: Var
    knots: np.ndarray
    weight: float
    max_error: float


@dataclass
class MatrixForm:
    c: np.ndarray
    c0: float
    A: sp.csr_matrix
    row_lb: np.ndarray
    row_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray
    maximize: bool


@dataclass
class Program:
    name: str = "program"
    sense: str = "min"
    var_names: list[str] = field(default_factory=list)
    var_lb: list[float] = field(default_factory=list)
    var_ub: list[float] = field(default_factory=list)
    var_kind: list[str] = field(default_factory=list)
    rows: list[dict[int, float]] = field(default_factory=list)
    row_sense: list[str] = field(default_factory=list)
    row_rhs: list[float] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    objective: LinExpr = field(default_factory=LinExpr)
    pwl_parts: list[PwlPart] = field(default_factory=list)

    def __post_init__(self):
        if self.sense not in ("min", "max"):
            raise ProgramError(f"unknown sense {self.sense!r}")
        self._by_name: dict[str, Var] = {}

    # variables -------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self.var_names)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    def add_var(self, name: str, lb: float = 0.0, ub: float = np.inf,
                kind: str = CONTINUOUS) -> Var:
        if kind not in (CONTINUOUS, BINARY):
            raise ProgramError(f"unknown variable kind {kind!r}")
        if name in self._by_name:
            raise ProgramError(f"duplicate variable {name!r}")
        if kind == BINARY:
            lb, ub = max(0.0, lb), min(1.0, ub)
        if lb > ub:
            raise ProgramError(f"variable {name!r} has lb {lb} > ub {ub}")
        v = Var(len(self.var_names), name)
        self.var_names.append(name)
        self.var_lb.append(float(lb))
        self.var_ub.append(float(ub))
        self.var_kind.append(kind)
        self._by_name[name] = v
        return v

    def var(self, name: str) -> Var:
        return self._by_name[name]

    def has_var(self, name: str) -> bool:
        return name in self._by_name

    def fix(self, v: Var, value: float) -> None:
        self.var_lb[v.index] = self.var_ub[v.index] = float(value)

    # constraints -----------------------------------------------------
    def add_constraint(self, lhs, sense: str, rhs=0.0, name: str | None = None) -> int:
        if sense not in ("<=", ">=", "=="):
            raise ProgramError(f"unknown constraint sense {sense!r}")
        expr = LinExpr.of(lhs) - LinExpr.of(rhs)
        n = self.n_vars
        for i in expr.terms:
            if not 0 <= i < n:
                raise ProgramError(f"constraint {name!r} references undeclared variable {i}")
        terms = {i: v for i, v in expr.terms.items() if v != 0.0}
        self.rows.append(terms)
        self.row_sense.append(sense)
        self.row_rhs.append(-expr.const)
        self.row_names.append(name or f"r{len(self.rows) - 1}")
        return len(self.rows) - 1

    def le(self, lhs, rhs, name=None) -> int:
        return self.add_constraint(lhs, "<=", rhs, name)

    def ge(self, lhs, rhs, name=None) -> int:
        return self.add_constraint(lhs, ">=", rhs, name)

    def eq(self, lhs, rhs, name=None) -> int:
        return self.add_constraint(lhs, "==", rhs, name)

    # objective -------------------------------------------------------
    def add_objective(self, expr, scale: float = 1.0) -> None:
        self.objective.iadd(expr, scale)

    # export ----------------------------------------------------------
    def to_matrix(self) -> MatrixForm:
        n, m = self.n_vars, self.n_rows
        indptr = np.zeros(m + 1, dtype=np.int64)
        idx: list[int] = []
        val: list[float] = []
        for r, terms in enumerate(self.rows):
            idx.extend(terms.keys())
            val.extend(terms.values())
            indptr[r + 1] = len(idx)
        A = sp.csr_matrix((np.asarray(val, dtype=float), np.asarray(idx, dtype=np.int64), indptr),
                          shape=(m, n))
        rhs = np.asarray(self.row_rhs, dtype=float)
        sense = np.asarray(self.row_sense)
        row_lb = np.where(sense == "<=", -np.inf, rhs)
        row_ub = np.where(sense == ">=", np.inf, rhs)
        c = np.zeros(n)
        for i, v in self.objective.terms.items():
            c[i] += v
        integrality = np.array([1 if k == BINARY else 0 for k in self.var_kind], dtype=np.int8)
        return MatrixForm(c=c, c0=self.objective.const, A=A, row_lb=row_lb, row_ub=row_ub,
                          lb=np.asarray(self.var_lb, dtype=float),
                          ub=np.asarray(self.var_ub, dtype=float),
                          integrality=integrality, maximize=self.sense == "max")

    def residual(self, x: np.ndarray) -> float:
        """Largest absolute violation of any row or bound at ``x``."""
        mf = self.to_matrix()
        return matrix_residual(mf, x)

    def to_lp(self) -> str:
        from .lpformat import write_lp
        return write_lp(self)


def matrix_residual(mf: MatrixForm, x: np.ndarray) -> float:
    worst = 0.0
    if mf.A.shape[0]:
        ax = mf.A @ x
        worst = max(worst, float(np.max(np.maximum(mf.row_lb - ax, 0.0), initial=0.0)),
                    float(np.max(np.maximum(ax - mf.row_ub, 0.0), initial=0.0)))
    if x.size:
        worst = max(worst, float(np.max(np.maximum(mf.lb - x, 0.0))),
                    float(np.max(np.maximum(x - mf.ub, 0.0))))
    return worst
