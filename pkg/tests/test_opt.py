import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmgrestore.opt import (BINARY, Program, ProgramError, add_chance_gate, add_chance_indicator,
                            add_hexagon, add_squared_deviation, hexagon_feasible, lsum, solve)
from cmgrestore.opt.approx import pwl_value

BACKENDS = ["bnb", "highs"]


@pytest.mark.parametrize("backend", BACKENDS)
def test_lp_box_max(backend):
    p = Program(sense="max")
    x = p.add_var("x", 0, 3)
    p.add_objective(x)
    sol = solve(p, backend=backend)
    assert sol.status == "optimal"
    assert sol[x] == pytest.approx(3.0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_milp_rounding_forced(backend):
    p = Program(sense="max")
    x = p.add_var("x", kind=BINARY)
    y = p.add_var("y", kind=BINARY)
    p.le(x + y, 1.5)
    p.add_objective(x + y)
    sol = solve(p, backend=backend)
    assert sol.objective == pytest.approx(1.0)


def _knapsack(seed, n=8):
    rng = np.random.default_rng(seed)
    w = rng.integers(1, 20, n).astype(float)
    v = rng.integers(1, 30, n).astype(float)
    cap = float(w.sum() // 2)
    return w, v, cap


def _enumerate(w, v, cap):
    best = 0.0
    for bits in itertools.product((0, 1), repeat=len(w)):
        b = np.array(bits)
        if b @ w <= cap:
            best = max(best, float(b @ v))
    return best


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_knapsack_matches_enumeration(seed):
    w, v, cap = _knapsack(seed)
    p = Program(sense="max")
    xs = [p.add_var(f"x{i}", kind=BINARY) for i in range(len(w))]
    p.le(lsum(wi * xi for wi, xi in zip(w, xs)), cap)
    p.add_objective(lsum(vi * xi for vi, xi in zip(v, xs)))
    sol = solve(p, backend="bnb", gap=0.0)
    assert sol.objective == pytest.approx(_enumerate(w, v, cap))
    assert sol.residual <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 12))
def test_bnb_matches_enumeration_random(seed, n):
    rng = np.random.default_rng(seed)
    A = rng.integers(-5, 10, (2, n)).astype(float)
    b = np.abs(A).sum(axis=1) / 3
    c = rng.normal(size=n)
    p = Program(sense="min")
    xs = [p.add_var(f"x{i}", kind=BINARY) for i in range(n)]
    for r in range(2):
        p.le(lsum(A[r, i] * xs[i] for i in range(n)), b[r])
    p.add_objective(lsum(c[i] * xs[i] for i in range(n)))
    best = np.inf
    for bits in itertools.product((0, 1), repeat=n):
        x = np.array(bits)
        if np.all(A @ x <= b + 1e-9):
            best = min(best, c @ x)
    sol = solve(p, backend="bnb", gap=0.0)
    assert sol.status == "optimal"
    assert sol.objective == pytest.approx(best, abs=1e-7)
    assert sol.residual <= 1e-6


def test_bnb_deterministic():
    w, v, cap = _knapsack(7, 12)
    outs = []
    for _ in range(2):
        p = Program(sense="max")
        xs = [p.add_var(f"x{i}", kind=BINARY) for i in range(len(w))]
        p.le(lsum(wi * xi for wi, xi in zip(w, xs)), cap)
        p.add_objective(lsum(vi * xi for vi, xi in zip(v, xs)))
        outs.append(solve(p, backend="bnb").x)
    assert np.array_equal(outs[0], outs[1])


def test_infeasible_hint_names_conflict():
    p = Program()
    x = p.add_var("x", 0, 10)
    y = p.add_var("y", 0, 10)
    p.le(x + y, 20, "loose")
    p.ge(x, 6, "xlow")
    p.le(x, 4, "xhigh")
    p.ge(y, 0, "ylow")
    sol = solve(p)
    assert sol.status == "infeasible"
    assert sorted(sol.iis_hint) == ["xhigh", "xlow"]


def test_undeclared_variable_rejected():
    p = Program()
    p.add_var("x")
    q = Program()
    q.add_var("a")
    z = q.add_var("b")
    with pytest.raises(ProgramError):
        p.le(z * 1.0, 1)


def test_lp_export_roundtrip_text():
    p = Program(name="t", sense="max")
    x = p.add_var("x", 0, 3)
    b = p.add_var("b", kind=BINARY)
    p.le(x + 2 * b, 4, "cap")
    p.add_objective(x + b)
    txt = p.to_lp()
    assert "Maximize" in txt and "Binary" in txt and "cap_0:" in txt and txt.endswith("End\n")


# hexagon -------------------------------------------------------------------

def test_hexagon_origin_and_edge_cases():
    S = 100.0
    assert hexagon_feasible(0.0, 0.0, S)
    assert not hexagon_feasible(S, 0.0, S)
    # vertex from intersecting b_up and c_up: solve the 2x2 system directly
    M = np.array([[np.sqrt(3), 1.0], [0.0, 1.0]])
    rhs = np.array([np.sqrt(3) * 1.1 * S, np.sqrt(3) / 2 * 1.1 * S])
    v = np.linalg.solve(M, rhs)
    assert v / S == pytest.approx([0.55, 0.952627944], abs=1e-6)
    assert hexagon_feasible(v[0], v[1], S, tol=1e-9)
    assert np.hypot(*v) == pytest.approx(1.1 * S)


def test_hexagon_rows_in_program_match_vector_test():
    S = 50.0
    rng = np.random.default_rng(3)
    for _ in range(20):
        p0, q0 = rng.uniform(-70, 70, 2)
        prog = Program()
        P = prog.add_var("P", p0, p0)
        Q = prog.add_var("Q", q0, q0)
        add_hexagon(prog, P, Q, S)
        sol = solve(prog)
        assert (sol.status == "optimal") == bool(hexagon_feasible(p0, q0, S, tol=1e-9))


def test_hexagon_quadrant_mask_row_count():
    prog = Program()
    P = prog.add_var("P", -10, 10)
    Q = prog.add_var("Q", -10, 10)
    assert len(add_hexagon(prog, P, Q, 5.0, quadrants=(1,))) == 3
    assert len(add_hexagon(prog, P, Q, 5.0, quadrants=(1, 4), name="h2")) == 5
    assert len(add_hexagon(prog, P, Q, 5.0, name="h3")) == 8


@settings(max_examples=50, deadline=None)
@given(st.floats(1.0, 2.0), st.floats(0.1, 1e4))
def test_hexagon_containment_property(tau, S):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.2 * tau * S, 1.2 * tau * S, (4000, 2))
    r = np.hypot(pts[:, 0], pts[:, 1])
    ok = hexagon_feasible(pts[:, 0], pts[:, 1], S, tau)
    assert np.all(r[ok] <= tau * S * (1 + 1e-12))
    assert np.all(ok[r <= np.sqrt(3) / 2 * tau * S])


# chance indicator ---------------------------------------------------------

def _chance_program(lhs_vals, rhs_vals, fixed):
    prog = Program(sense="max")
    y = prog.add_var("y", fixed, fixed)
    lhs = [y * 1.0 for _ in lhs_vals]
    rhs = [float(r) for r in rhs_vals]
    M = max(1.0, max(rhs_vals) - fixed + 1.0)
    phi, z = add_chance_indicator(prog, lhs, rhs, [1 / len(rhs)] * len(rhs), M)
    prog.add_objective(phi)
    return prog, phi


def test_chance_all_satisfied_phi_one():
    prog, phi = _chance_program([0] * 20, np.zeros(20), 1.0)
    sol = solve(prog, backend="highs")
    assert sol[phi] == pytest.approx(1.0)


def test_chance_fraction_matches_bruteforce():
    rng = np.random.default_rng(11)
    rhs = rng.uniform(0, 10, 20)
    for _ in range(50):
        y0 = float(rng.uniform(0, 10))
        prog, phi = _chance_program([0] * 20, rhs, y0)
        sol = solve(prog, backend="highs")
        assert sol[phi] == pytest.approx(np.mean(y0 >= rhs), abs=1e-9)


@pytest.mark.parametrize("eps,theta_expected", [(0.05, 0.0), (0.20, 1.0)])
def test_chance_gate_18_of_20(eps, theta_expected):
    rhs = np.r_[np.zeros(18), 100.0, 100.0]
    prog = Program(sense="max")
    y = prog.add_var("y", 0, 1)
    phi, _ = add_chance_indicator(prog, [y * 1.0] * 20, list(rhs), [0.05] * 20, 101.0)
    th = prog.add_var("theta", kind=BINARY)
    add_chance_gate(prog, phi, th, eps)
    prog.add_objective(th)
    sol = solve(prog)
    assert sol[th] == theta_expected
    # hand arithmetic: theta <= phi - (1 - eps) + 1 with phi = 0.9
    assert (0.9 - (1 - eps) + 1 >= 1) == bool(theta_expected)


def test_chance_rejects_nonpositive_m():
    prog = Program()
    y = prog.add_var("y")
    with pytest.raises(ProgramError):
        add_chance_indicator(prog, [y], [1.0], [1.0], 0.0)


# squared deviation --------------------------------------------------------

def _sqdev(dev, knots, weight=2.0):
    prog = Program()
    x = prog.add_var("x", dev, dev)
    part = add_squared_deviation(prog, x, 0.0, weight, knots)
    sol = solve(prog)
    return sol.objective, part


def test_sqdev_examples():
    assert _sqdev(0.0, [-1, 0, 1])[0] == pytest.approx(0.0)
    assert _sqdev(1.0, [-1, 0, 1])[0] == pytest.approx(2.0)
    val, part = _sqdev(0.5, [-1, 0, 1])
    assert val == pytest.approx(2.0 * 0.5)
    assert val - 2.0 * 0.25 == pytest.approx(2.0 * 0.25)
    assert part.max_error == pytest.approx(2.0 * 0.25)


def test_sqdev_rejects_bad_knots():
    prog = Program()
    x = prog.add_var("x")
    with pytest.raises(ProgramError):
        add_squared_deviation(prog, x, 0, 1, [-1, 1, 0])
    with pytest.raises(ProgramError):
        add_squared_deviation(prog, x, 0, 1, [-1, 1])


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.integers(3, 21))
def test_sqdev_error_bound_property(dev, count):
    knots = np.linspace(-3, 3, count)
    val, part = _sqdev(dev, knots, 1.0)
    assert val >= dev ** 2 - 1e-9
    assert val - dev ** 2 <= part.max_error + 1e-9
    assert val == pytest.approx(pwl_value(part, dev), abs=1e-9)


def test_sqdev_in_max_program_penalises():
    prog = Program(sense="max")
    x = prog.add_var("x", 0, 10)
    prog.add_objective(x, 0.0)
    add_squared_deviation(prog, x, 4.0, 1.0, np.linspace(-8, 8, 17))
    sol = solve(prog)
    assert sol[x] == pytest.approx(4.0)
