import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmgrestore.ledger import RunLedger
from cmgrestore.metrics import (STEPS, HorizonMismatch, compare_runs, compute_metrics,
                                read_metrics, write_metrics)


def _ledger(on, classes=("CL",), phase=(100.0, 100.0, 100.0), soc=None, cmg=None, hours=None,
            fc=10.0):
    """Synthetic run: ``on[i]`` is the per-step connected share of each load."""
    on = np.atleast_2d(np.asarray(on, float))
    n = on.shape[0]
    soc = np.full(n, 50.0) if soc is None else np.asarray(soc, float)
    cmg = np.ones(n) if cmg is None else np.asarray(cmg)
    cls = np.array(classes)
    L = RunLedger()
    L.add_many("META", 0, -1, -1, {"horizon": hours if hours is not None else n // STEPS,
                                   "reserve_band": 25.0, "load_class": ";".join(classes)})
    for i in range(n):
        t, k = divmod(i, STEPS)
        srv = on[i] * fc
        L.add_many("SIM", t, k // 3, k, {
            "soc_gf": soc[i], "cmg_on": int(cmg[i]),
            "fc_cl": fc * (cls == "CL").sum(), "fc_ncl": fc * (cls == "NCL").sum(),
            "srv_cl": srv[cls == "CL"].sum(), "srv_ncl": srv[cls == "NCL"].sum(),
            "on": on[i], "phase": phase, "pv_used": 5.0, "pv_avail": 10.0})
    return L


def test_single_cl_node_two_hours():
    m = compute_metrics(_ledger(np.ones((24, 1))))
    assert m["T_ASD_CL_h"] == pytest.approx(2.0)
    assert m["T_AID_CL_h"] == pytest.approx(0.0)
    assert m["P_CL_pct"] == pytest.approx(100.0)
    assert m["P_PV_total_pct"] == pytest.approx(50.0)


def test_phase_imbalance_worked_case():
    m = compute_metrics(_ledger(np.ones((12, 1)), phase=(110.0, 100.0, 90.0)))
    assert m["P_Imb_pct"] == pytest.approx(10.0)


def test_reserve_and_off_time():
    soc = np.r_[np.full(6, 30.0), np.full(6, 20.0)]
    cmg = np.r_[np.ones(9), np.zeros(3)]
    m = compute_metrics(_ledger(np.ones((12, 1)), soc=soc, cmg=cmg))
    assert m["T_RL_ES_pct"] == pytest.approx(50.0)
    assert m["T_CMG_OFF_h"] == pytest.approx(0.25)
    assert m["SOC_ES_balance_pct"] == 20.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.sampled_from([0.0, 1.0]), min_size=3, max_size=3),
                min_size=12, max_size=36))
def test_asd_plus_aid_is_horizon(rows):
    rows = rows[: len(rows) // STEPS * STEPS]
    m = compute_metrics(_ledger(rows, classes=("CL", "NCL", "NCL")))
    h = len(rows) / STEPS
    assert m["T_ASD_CL_h"] + m["T_AID_CL_h"] == pytest.approx(h)
    assert m["T_ASD_NCL_h"] + m["T_AID_NCL_h"] == pytest.approx(h)
    assert 0.0 <= m["P_total_pct"] <= 100.0


def test_deterministic_and_compare(tmp_path):
    a = compute_metrics(_ledger(np.ones((24, 2)), classes=("CL", "NCL")))
    b = compute_metrics(_ledger(np.ones((24, 2)), classes=("CL", "NCL")))
    assert a == b
    assert all(d == 0.0 for d, _ in compare_runs(a, b).values())
    c = dict(a, P_NCL_pct=90.0)
    assert compare_runs(a, c)["P_NCL_pct"] == (-10.0, "worse")
    write_metrics(a, tmp_path / "m.csv")
    assert read_metrics(tmp_path / "m.csv") == pytest.approx(a)


def test_horizon_mismatch_and_prefix(tmp_path):
    L = _ledger(np.ones((24, 1)), hours=3)
    with pytest.raises(HorizonMismatch):
        compute_metrics(L, strict=True)
    # a run cut off mid-way still scores the covered steps
    L.write(tmp_path / "full.csv")
    text = (tmp_path / "full.csv").read_text().splitlines()
    (tmp_path / "cut.csv").write_text("\n".join(text[: len(text) * 2 // 3]) + "\n1,2")
    m = compute_metrics(RunLedger.read(tmp_path / "cut.csv"))
    assert 0 < m["hours"] < 2.0
    assert m["T_ASD_CL_h"] == pytest.approx(m["hours"])


def test_gap_in_steps_rejected():
    L = _ledger(np.ones((24, 1)))
    L.rows = [r for r in L.rows if not (r[0] == "SIM" and r[1] == 0 and r[3] == 5)]
    with pytest.raises(HorizonMismatch):
        compute_metrics(L)
