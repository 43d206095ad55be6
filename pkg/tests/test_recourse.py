import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmgrestore.recourse import FeHistory, compute_fe_impact, fit_trend, recourse_term


def test_fe_impact_examples():
    assert compute_fe_impact(60, 60, 5500) == 0
    assert compute_fe_impact(60, 55, 5500) == pytest.approx(275.0)
    assert compute_fe_impact(60, 64, 5500) == pytest.approx(-220.0)


def test_fe_impact_rejects_bad_soc():
    with pytest.raises(ValueError):
        compute_fe_impact(101, 50, 100)


def _ols_slope(y):
    t = np.arange(1, len(y) + 1)
    return np.polyfit(t, y, 1)[0]


def test_trend_examples():
    assert fit_trend(np.zeros(10), 10) == 0
    assert fit_trend([0.1, 0.2, 0.3, 0.4], 4) == pytest.approx(0.1)
    assert fit_trend([0.4, 0.3, 0.2, 0.1], 4) == pytest.approx(-0.1)


def test_trend_padding():
    # two samples, n = 4: fit over (0, 0, 0.2, 0.4)
    assert fit_trend([0.2, 0.4], 4) == pytest.approx(_ols_slope([0, 0, 0.2, 0.4]))


def test_zero_intercept_variant():
    y = [0.1, 0.2, 0.3, 0.4]
    t = np.arange(1, 5)
    assert fit_trend(y, 4, zero_intercept=True) == pytest.approx(t @ y / (t @ t))


def test_scaling_clamps():
    h = FeHistory(e_max=100.0)
    for v in (50, 250, -300):
        h.append(v)
    assert list(h.scaled) == [0.5, 1.0, -1.0]


def test_recourse_term_assembly():
    h = FeHistory(e_max=550.0)
    assert recourse_term(h, 10).reduction == 0
    for v in [0] * 9 + [110.0]:
        h.append(v)
    term = recourse_term(h, 10)
    assert term.p_fe_prev == 110.0
    assert term.slope == pytest.approx(_ols_slope([0] * 9 + [0.2]))
    assert term.a_kwh == pytest.approx(term.slope * 550)
    assert abs(term.a_kwh) < term.p_fe_prev


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=30), st.integers(2, 14))
def test_slope_bounded(values, n):
    a = fit_trend(values, n)
    assert -1 <= a <= 1
    if n >= 3:
        y = np.asarray(values[-n:])
        y = np.concatenate([np.zeros(n - y.size), y])
        assert a == pytest.approx(_ols_slope(y), abs=1e-9)
