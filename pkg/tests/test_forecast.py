import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmgrestore.forecast import (ErrorCase, ErrorModel, Profile, blend, inject_error, mape,
                                 read_profile_csv, sample_scenarios, synthetic_forecast,
                                 write_profile_csv)
from cmgrestore.grid import fixture_path, load_network


@pytest.fixture(scope="module")
def desk():
    return load_network(fixture_path("desk13"))


@pytest.fixture(scope="module")
def base(desk):
    return synthetic_forecast(desk, 0, 24, resolution_min=60)


def _const(val, steps=12):
    p = np.full((steps, 1, 3), float(val))
    return Profile(start_hour=0, resolution_min=5, node_ids=["a"], unit_ids=["pv"], p=p,
                   q=0.3 * p, pv=np.full((steps, 1), 50.0), pv_rating=np.array([100.0]))


def test_zero_model_reproduces_base(base):
    sc = sample_scenarios(base, ErrorModel(kind="zero"), 3, seed=1)
    for s in sc.scenarios:
        np.testing.assert_array_equal(s.p, base.p)
        np.testing.assert_array_equal(s.pv, base.pv)


def test_equiprobable_scenarios(base):
    sc = sample_scenarios(base, ErrorModel(), 20, seed=1)
    np.testing.assert_allclose(sc.probabilities, 0.05)


def test_scenarios_deterministic(base):
    a = sample_scenarios(base, ErrorModel(), 5, seed=7)
    b = sample_scenarios(base, ErrorModel(), 5, seed=7)
    for x, y in zip(a.scenarios, b.scenarios):
        assert x.p.tobytes() == y.p.tobytes() and x.pv.tobytes() == y.pv.tobytes()


def test_scenarios_clipped(base):
    sc = sample_scenarios(base, ErrorModel(sigma_pv=1.5), 10, seed=3)
    for s in sc.scenarios:
        assert np.all(s.p >= 0)
        assert np.all(s.pv <= base.pv_rating[None, :] + 1e-12)


def test_scenario_mean_converges():
    prof = _const(100.0, steps=2)
    sc = sample_scenarios(prof, ErrorModel(), 10_000, seed=11)
    mean = np.mean([s.p.mean() for s in sc.scenarios])
    assert mean == pytest.approx(100.0, rel=0.02)


def test_fe1_zero_is_identity():
    prof = _const(100.0)
    out = inject_error(prof, ErrorCase("FE1", 0.0), seed=0)
    np.testing.assert_array_equal(out.p, prof.p)


def test_fe1_plus_30():
    prof = _const(100.0)
    out = inject_error(prof, ErrorCase("FE1", 30.0), seed=0)
    # oracle: forecast 100 is 30% above the realization
    np.testing.assert_allclose(out.p, 100.0 / 1.3)
    assert out.p[0, 0, 0] == pytest.approx(76.923, abs=1e-3)
    assert mape(prof, out) == pytest.approx(30.0)


def test_fe1_monotone_linear():
    prof = _const(100.0)
    got = [mape(prof, inject_error(prof, ErrorCase("FE1", b), 0)) for b in (5, 10, 20, 30)]
    np.testing.assert_allclose(got, [5, 10, 20, 30])


@pytest.mark.parametrize("target", [5.0, 10.0, 30.0])
def test_fe2_hits_target(base, target):
    out = inject_error(base, ErrorCase("FE2", target), seed=4)
    assert abs(mape(base, out) - target) <= 0.5
    assert np.all(out.p >= 0)
    assert np.all(out.pv <= base.pv_rating[None, :] + 1e-9)


@pytest.mark.parametrize("kind, mag", [("FE1", 31), ("FE1", -31), ("FE2", 0), ("FE2", 40),
                                       ("FE3", 1)])
def test_error_case_bounds(kind, mag):
    with pytest.raises(ValueError):
        ErrorCase(kind, mag)


def test_mape_examples():
    assert mape(np.ones(4), np.ones(4)) == 0.0
    assert mape(np.full(3, 110.0), np.full(3, 100.0)) == pytest.approx(10.0)
    assert mape(np.array([90.0, 120.0]), np.array([100.0, 100.0])) == pytest.approx(15.0)
    val, excl = mape(np.array([1.0, 2.0]), np.array([0.0, 2.0]), return_excluded=True)
    assert val == 0.0 and excl == 1
    with pytest.raises(ValueError):
        mape(np.ones(2), np.ones(3))


def test_resolutions_conserve_energy(desk):
    f5 = synthetic_forecast(desk, 0, 3, resolution_min=5)
    f60 = f5.coarsen(60)
    assert f60.steps == 3
    np.testing.assert_allclose(f60.p.sum() * 1.0, f5.p.sum() * 5 / 60)
    np.testing.assert_allclose(f5.coarsen(15).refine(5).coarsen(15).p, f5.coarsen(15).p)


def test_blend_endpoints(base):
    real = inject_error(base, ErrorCase("FE1", 10.0), 0)
    np.testing.assert_array_equal(blend(base, real, 0.0).p, base.p)
    np.testing.assert_allclose(blend(base, real, 1.0).p, real.p)
    with pytest.raises(ValueError):
        blend(base, real, 1.5)


def test_csv_round_trip(desk, tmp_path):
    f = synthetic_forecast(desk, 6, 1, resolution_min=15)
    path = tmp_path / "prof.csv"
    write_profile_csv(f, path)
    g = read_profile_csv(path, f)
    np.testing.assert_allclose(g.p, f.p)
    np.testing.assert_allclose(g.pv, f.pv)


@settings(max_examples=25, deadline=None)
@given(st.floats(-30, 30))
def test_fe1_nonnegative(bias):
    prof = _const(80.0)
    out = inject_error(prof, ErrorCase("FE1", bias), 0)
    assert np.all(out.p >= 0) and np.all(out.pv <= prof.pv_rating[None, :] + 1e-12)
