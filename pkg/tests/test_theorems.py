import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmgrestore.theorems import GAMMA_GRID, simulate, verify_theorems


def test_zero_error_never_exhausts():
    for rec in (False, True):
        tr = simulate(2400, 100, 48, 0.0, rec)
        assert tr.exhaust_time is None
        assert tr.end_balance == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("g", GAMMA_GRID)
def test_exhaust_time_closed_form(g):
    # uncapped plan: X_{T-1} > 0 and the last draw is (1+g) X_{T-1}, so the
    # stock runs out a fraction 1/(1+g) into the final hour
    tr = simulate(2400, 100, 48, g)
    gg = 0.01 * g
    assert tr.exhaust_time == pytest.approx(48 - gg / (1 + gg), abs=1e-9)
    assert tr.end_balance < 0
    assert tr.crossing_hour is not None and tr.crossing_hour <= 48


def test_no_recourse_product_formula():
    g, T, X = 0.1, 12, 500.0
    tr = simulate(X, 1000, T, 10.0)
    expect = X * np.cumprod([1 - (1 + g) / (T - t + 1) for t in range(1, T + 1)])
    assert np.allclose(tr.stock, expect)


def test_recourse_end_balance_nonnegative_and_identity():
    tr = simulate(2400, 100, 48, 10.0, recourse=True)
    assert tr.end_balance >= 0
    assert np.all(tr.stock >= 0)
    assert tr.identity_residual < 1e-9
    # the recourse bookkeeping spends less on error than the plain run
    plain = simulate(2400, 100, 48, 10.0)
    assert tr.x_err[-1] < plain.x_err[-1]


def test_verify_report_all_pass_and_fast():
    rep = verify_theorems()
    assert rep.ok
    assert [r["gamma"] for r in rep.rows] == list(GAMMA_GRID)
    assert rep.wall_time < 5.0
    assert len(rep.lines()) == len(GAMMA_GRID) + 2


def test_verify_rejects_surplus_supply():
    with pytest.raises(ValueError):
        verify_theorems(horizon=10, total=2000, demand=100)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 72), st.floats(0.05, 0.95), st.floats(0.5, 30.0))
def test_both_theorems_hold_generally(T, frac, g):
    D = 100.0
    X = frac * D * T
    assert simulate(X, D, T, g).exhaust_time < T
    rc = simulate(X, D, T, g, recourse=True)
    assert rc.end_balance >= -1e-9
