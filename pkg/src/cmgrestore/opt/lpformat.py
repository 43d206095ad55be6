"""CPLEX LP-format writer, for cross-checking programs with external solvers."""
from __future__ import annotations

import math
import re

_BAD = re.compile(r"[^A-Za-z0-9_.\[\]]")


def _clean(name: str) -> str:
    s = _BAD.sub("_", name)
    if not s or s[0].isdigit() or s[0] in ".eE":
        s = "v_" + s
    return s


def _fmt_terms(terms: dict[int, float], names: list[str]) -> str:
    if not terms:
        return "0 " + names[0] if names else "0"
    parts = []
    for i, v in sorted(terms.items()):
        sign = "-" if v < 0 else "+"
        parts.append(f"{sign} {abs(v):.12g} {names[i]}")
    s = " ".join(parts)
    return s[2:] if s.startswith("+ ") else s


def write_lp(prog) -> str:
    names = [_clean(n) for n in prog.var_names]
    # keep names unique after cleaning
    seen: dict[str, int] = {}
    for i, n in enumerate(names):
        if n in seen:
            seen[n] += 1
            names[i] = f"{n}_{seen[n]}"
        else:
            seen[n] = 0
    out = [f"\\ {prog.name}", "Maximize" if prog.sense == "max" else "Minimize"]
    obj = _fmt_terms(prog.objective.terms, names)
    out.append(f" obj: {obj}")
    out.append("Subject To")
    ops = {"<=": "<=", ">=": ">=", "==": "="}
    for r, terms in enumerate(prog.rows):
        rn = _clean(prog.row_names[r])
        out.append(f" {rn}_{r}: {_fmt_terms(terms, names)} {ops[prog.row_sense[r]]} {prog.row_rhs[r]:.12g}")
    out.append("Bounds")
    for i, n in enumerate(names):
        lb, ub = prog.var_lb[i], prog.var_ub[i]
        if prog.var_kind[i] == "binary":
            continue
        lo = "-inf" if math.isinf(lb) else f"{lb:.12g}"
        hi = "+inf" if math.isinf(ub) else f"{ub:.12g}"
        out.append(f" {lo} <= {n} <= {hi}")
    bins = [names[i] for i, k in enumerate(prog.var_kind) if k == "binary"]
    if bins:
        out.append("Binary")
        for k in range(0, len(bins), 8):
            out.append(" " + " ".join(bins[k:k + 8]))
    out.append("End")
    return "\n".join(out) + "\n"
