import numpy as np
import pytest

from cmgrestore.config import Params
from cmgrestore.nrt import SLOTS, build_nrt, load_weights, solve_nrt
from cmgrestore.opt import solve
from cmgrestore.recourse import ZERO_TERM, RecourseTerm


def _total(plan, h):
    return sum(v[h].sum() for v in plan.served.values())


def test_fixed_point_serves_everything(desk, desk_sens, make_nrt_inputs):
    inp = make_nrt_inputs(desk, recourse=ZERO_TERM)
    plan = solve_nrt(desk, desk_sens, inp)
    assert plan.status in ("optimal", "feasible") and not plan.relaxations
    assert all(v == 1 for v in plan.x.values())
    np.testing.assert_allclose(plan.cut_slack, 0.0, atol=1e-6)
    for n in plan.served:
        np.testing.assert_allclose(plan.served[n], plan.demand[n])


def test_cut_lowered_by_recourse(desk, desk_sens, make_nrt_inputs):
    rec = RecourseTerm(p_fe_prev=50.0, slope=0.1, a_kwh=20.0)
    inp = make_nrt_inputs(desk, recourse=rec)
    b = build_nrt(desk, desk_sens, inp)
    base = sum(inp.eds_load[n] for n in b.pdem)
    assert b.cap == pytest.approx(base - 70.0)
    plan = solve_nrt(desk, desk_sens, inp)
    for h in range(SLOTS):
        assert _total(plan, h) <= plan.cut_cap + plan.cut_slack[h] + 1e-6


def test_pinned_zone_survives_tight_cut(desk, desk_sens, make_nrt_inputs):
    # a cap near zero: every free NCL zone goes, the pinned one stays and the
    # residual violation is carried by the priced slack
    rec = RecourseTerm(p_fe_prev=5000.0)
    pin = {("n3", 0), ("n3", 1), ("n3", 2)}
    inp = make_nrt_inputs(desk, recourse=rec, pinned=pin)
    plan = solve_nrt(desk, desk_sens, inp)
    for k in pin:
        assert plan.x[k] == 1
    free_ncl = [k for k in plan.x if k not in pin and desk.nodes.get(k[0]) is not None
                and desk.nodes[k[0]].load_class == "NCL"]
    assert free_ncl and all(plan.x[k] == 0 for k in free_ncl)
    assert plan.cut_slack.max() > 0


def test_cl_zones_always_on(desk, desk_sens, make_nrt_inputs):
    plan = solve_nrt(desk, desk_sens, make_nrt_inputs(desk, recourse=RecourseTerm(1e4)))
    for (z, ph), on in plan.x.items():
        if z in desk.nodes and desk.nodes[z].load_class == "CL":
            assert on == 1


def test_voltage_law_and_imbalance(desk, desk_sens, make_nrt_inputs):
    inp = make_nrt_inputs(desk, groups=(1, 2, 3), hour=19)
    b = build_nrt(desk, desk_sens, inp)
    sol = solve(b.prog, backend="highs")
    assert sol.ok
    sb = desk.base.s_phase
    child = {desk.parent_edge[n]: n for n in inp.nodes if n != desk.root}
    for e in b.edges:
        ed = desk.edges[e]
        c = child[e]
        p = desk.parent_of(c)
        for h in range(SLOTS):
            assert sum(sol[r] for r in b.rho[e, h]) == pytest.approx(1.0)
            P = np.zeros(3)
            Q = np.zeros(3)
            for ph in np.flatnonzero(ed.mask):
                P[ph] = sol[b.pf[e, ph, h]] - sol[b.pb[e, ph, h]]
                Q[ph] = sol[b.q[e, ph, h]]
            drop = desk_sens.drop(e, P / sb, Q / sb)
            for ph in np.flatnonzero(ed.mask & desk.nodes[c].mask):
                assert sol[b.v[c, ph, h]] - sol[b.v[p, ph, h]] == pytest.approx(drop[ph], abs=1e-6)
                assert 0.95 ** 2 - 1e-9 <= sol[b.v[c, ph, h]] <= 1.05 ** 2 + 1e-9
    # the imbalance variable bounds every phase deviation of served load
    for h in range(SLOTS):
        tot = np.zeros(3)
        for n in b.pdem:
            for z, ph in b.keys_of[n]:
                tot[ph] += sol[b.x[z, ph]] * b.pdem[n][h, ph]
        dev = np.abs(tot - tot.mean()).max() / sb
        assert sol[b.delta[h]] >= dev - 1e-6


def test_dg_phase_spread_bounded(desk, desk_sens, make_nrt_inputs):
    p = Params()
    inp = make_nrt_inputs(desk, groups=(1, 2, 3), hour=20,
                          eds_dg={"dg1": 600.0, "dg2": 300.0})
    plan = solve_nrt(desk, desk_sens, inp, p)
    for gid, pp in plan.dg_p.items():
        g = desk.generators[gid]
        sp = g.s_kva / g.n_phases
        phs = pp[g.mask]
        assert np.abs(phs - np.roll(phs, -1)).max() <= p.dg_imbalance_frac * sp + 1e-6


def test_dg_without_fuel_is_left_off(desk, desk_sens, make_nrt_inputs):
    g = desk.generators["dg1"]
    inp = make_nrt_inputs(desk, groups=(1, 2), fuel0={"dg1": g.fuel_min + 1.0,
                                                      "dg2": desk.generators["dg2"].fuel_init})
    plan = solve_nrt(desk, desk_sens, inp)
    assert plan.dg_off == ["dg1"] and "dg1" not in plan.dg_p


def test_clpu_added_to_demand(desk, desk_sens, make_nrt_inputs):
    extra = (np.array([10.0, 10.0, 10.0]), np.array([3.0, 3.0, 3.0]))
    inp = make_nrt_inputs(desk, clpu={"n2": extra})
    plan = solve_nrt(desk, desk_sens, inp)
    i = inp.forecast.node_ids.index("n2")
    np.testing.assert_allclose(plan.demand["n2"], inp.forecast.p[:SLOTS, i] + 10.0)


def test_voltage_fallback_then_cmg_off(desk, desk_sens, make_nrt_inputs):
    inp = make_nrt_inputs(desk)
    plan = solve_nrt(desk, desk_sens, inp, Params(v_max=1.035))
    assert plan.relaxations == ["equity", "voltage"] and not plan.cmg_off
    plan = solve_nrt(desk, desk_sens, inp, Params(v_max=1.0))
    assert plan.cmg_off and plan.status == "infeasible"


def test_weights_keep_cl_ahead(desk):
    w = load_weights(desk, {n.id: 1.5 for n in desk.load_nodes() if n.load_class == "NCL"})
    cl = min(v for n, v in w.items() if desk.nodes[n].load_class == "CL")
    ncl = max(v for n, v in w.items() if desk.nodes[n].load_class == "NCL")
    assert cl > ncl


def test_forecast_resolution_checked(desk, desk_sens, make_nrt_inputs):
    inp = make_nrt_inputs(desk)
    inp.forecast = inp.forecast.refine(5)
    with pytest.raises(ValueError):
        build_nrt(desk, desk_sens, inp)
