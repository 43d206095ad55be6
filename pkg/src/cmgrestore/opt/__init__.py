from .approx import (add_chance_gate, add_chance_indicator, add_hexagon, add_squared_deviation,
                     hexagon_feasible, symmetric_knots)
from .program import BINARY, CONTINUOUS, LinExpr, Program, ProgramError, Var, lsum
from .solve import Solution, backends, register_backend, solve

__all__ = [
    "BINARY", "CONTINUOUS", "LinExpr", "Program", "ProgramError", "Solution", "Var",
    "add_chance_gate", "add_chance_indicator", "add_hexagon", "add_squared_deviation",
    "backends", "hexagon_feasible", "lsum", "register_backend", "solve", "symmetric_knots",
]
