import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmgrestore.grid import fixture_path, load_network
from cmgrestore.lindist import build_sensitivities, lindistflow_voltages, sensitivity_matrices
from cmgrestore.powerflow import PowerFlowDiverged, sweep_power_flow

KVA, KV = 3000.0, 12.47
ZB = KV ** 2 * 1000 / KVA


def _single_phase(r_pu=0.05, x_pu=0.02):
    return load_network({
        "name": "sp", "base": {"kva": KVA, "kv": KV},
        "nodes": [{"id": "i", "phases": "A"},
                  {"id": "j", "phases": "A", "load_class": "NCL", "p_kw": [10], "q_kvar": [0]}],
        "edges": [{"id": "e", "from": "i", "to": "j", "phases": "A",
                   "r": r_pu * ZB, "x": x_pu * ZB}],
        "generators": [{"id": "es", "kind": "ES", "node": "i", "phases": "A", "s_kva": 100,
                        "e_kwh": 100, "grid_forming": True}],
    })


@pytest.fixture(scope="module")
def desk():
    return load_network(fixture_path("desk13"))


def test_single_phase_sensitivity():
    m = _single_phase()
    s = build_sensitivities(m)
    assert s.A["e"][0, 0] == pytest.approx(-0.10)
    assert s.B["e"][0, 0] == pytest.approx(-0.04)
    assert np.count_nonzero(s.A["e"]) == 1


def test_three_phase_coupling_entry():
    r = np.full((3, 3), 0.01)
    x = np.full((3, 3), 0.02)
    A, B = sensitivity_matrices(r, x)
    assert A[0, 1] == pytest.approx(0.01 - np.sqrt(3) * 0.02)
    assert A[0, 1] == pytest.approx(-0.02464, abs=1e-5)
    assert A[0, 0] == pytest.approx(-0.02) and B[0, 0] == pytest.approx(-0.04)


def test_voltage_propagation_example():
    m = _single_phase()
    s = build_sensitivities(m)
    # upstream value that leaves 1.0 at the receiving end under 0.01 pu flow
    v2 = lindistflow_voltages(m, s, ["i", "j"], {"j": np.array([0.01, 0, 0])}, {}, np.sqrt(1.001))
    assert v2["i"][0] == pytest.approx(1.001)
    assert v2["j"][0] == pytest.approx(1.0)


def test_sweep_zero_injection(desk):
    res = sweep_power_flow(desk, desk.node_order, {}, v_slack=1.04)
    for n in desk.node_order:
        m = desk.nodes[n].mask
        np.testing.assert_allclose(res.vmag(n)[m], 1.04, atol=1e-12)
    np.testing.assert_allclose(res.slack_s, 0, atol=1e-12)


def test_two_bus_closed_form():
    m = _single_phase()
    P, R, X = 0.01, 0.05, 0.02
    res = sweep_power_flow(m, ["i", "j"], {"j": np.array([P, 0, 0], complex)}, v_slack=1.0)
    # |V2|^4 - (V1^2 - 2RP)|V2|^2 + |Z|^2 P^2 = 0, upper root
    b = 1.0 - 2 * R * P
    x = (b + np.sqrt(b * b - 4 * (R * R + X * X) * P * P)) / 2
    assert res.v2("j")[0] == pytest.approx(x, abs=1e-8)
    # same case through the linearisation
    s = build_sensitivities(m)
    lin = lindistflow_voltages(m, s, ["i", "j"], {"j": np.array([P, 0, 0])}, {}, 1.0)
    assert abs(lin["j"][0] - res.v2("j")[0]) <= 1e-3


def test_sweep_diverges_under_collapse():
    m = _single_phase(r_pu=0.5, x_pu=0.5)
    with pytest.raises(PowerFlowDiverged):
        sweep_power_flow(m, ["i", "j"], {"j": np.array([5.0, 0, 0], complex)}, v_slack=1.0)


def test_slack_must_be_energized(desk):
    with pytest.raises(ValueError):
        sweep_power_flow(desk, ["n2", "n3"], {}, slack_node="n1")


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.0, 0.05), min_size=13, max_size=13),
       st.lists(st.floats(0.0, 0.02), min_size=13, max_size=13))
def test_sweep_energy_balance(desk, p, q):
    s = {n: (p[i] + 1j * q[i]) * np.ones(3) for i, n in enumerate(desk.node_order)}
    res = sweep_power_flow(desk, desk.node_order, s)
    assert res.residual <= 1e-6
    # losses are nonnegative in total and the linearisation stays close
    assert res.losses.real.sum() >= -1e-12
    sens = build_sensitivities(desk)
    lin = lindistflow_voltages(desk, sens, desk.node_order,
                               {n: np.real(v) for n, v in s.items()},
                               {n: np.imag(v) for n, v in s.items()})
    gap = max(np.nanmax(np.abs(res.v2(n) - lin[n])) for n in desk.node_order)
    assert gap <= 0.01
