"""Real-time (5-minute) dispatch. Switching and DG output come from the
hourly stage; what is left is an LP that tracks available PV while the
grid-forming storage absorbs the residual."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Params
from .grid import NetworkModel
from .lindist import LineSensitivity
from .nrt import NrtPlan
from .opt import LinExpr, Program, add_hexagon, add_squared_deviation, solve
from .opt.approx import symmetric_knots

log = logging.getLogger(__name__)

DK = 5.0 / 60.0  # hours per step
ES_MOVE = 1e-3   # tie-break on grid-following storage moving off its hourly plan
SHED_COST = 1e3


@dataclass
class RtInputs:
    hour: int
    slot: int
    step: int                       # 0..11 within the hour
    plan: NrtPlan
    load_p: dict[str, np.ndarray]   # forecast for this step, per node and phase (kW)
    load_q: dict[str, np.ndarray]
    pv_avail: dict[str, float]      # per unit, kW
    soc: dict[str, float]
    clpu: dict[str, tuple] = field(default_factory=dict)


@dataclass
class RtDispatch:
    status: str
    pv: dict[str, np.ndarray]
    pv_q: dict[str, np.ndarray]
    es_p: dict[str, np.ndarray]
    es_q: dict[str, np.ndarray]
    dg_p: dict[str, np.ndarray]
    dg_q: dict[str, np.ndarray]
    served: dict[str, np.ndarray]   # fraction of each node phase left connected
    v2: dict[str, np.ndarray] = field(default_factory=dict)
    objective: float = np.nan
    wall_time: float = 0.0
    relaxations: list[str] = field(default_factory=list)
    cmg_off: bool = False


def build_rt(model: NetworkModel, sens: LineSensitivity, inp: RtInputs,
             params: Params = Params(), relax: tuple[str, ...] = ()):
    plan = inp.plan
    sb = model.base.s_phase
    live = set(plan.nodes)
    nodes = [n for n in model.node_order if n in live]
    root = model.root
    gf = model.grid_forming
    prog = Program(name=f"rt_{inp.hour}_{inp.step}", sense="min")
    child_of = {model.parent_edge[n]: n for n in nodes if n != root}
    lo_op = {g.id: g.soc_op_min for g in model.gens("ES")}
    hi_op = {g.id: g.soc_op_max for g in model.gens("ES")}
    h = inp.slot

    # loads are set by the hourly switching decisions
    dem_p, dem_q, shed = {}, {}, {}
    for n in nodes:
        nd = model.nodes[n]
        if not nd.has_load:
            continue
        on = np.zeros(3)
        for ph in range(3):
            on[ph] = plan.x.get((nd.dr_zone, ph), 0)
        ep, eq = inp.clpu.get(n, (np.zeros(3), np.zeros(3)))
        dem_p[n] = on * (inp.load_p[n] + ep) * nd.mask
        dem_q[n] = on * (inp.load_q[n] + eq) * nd.mask
    top = max((nd.omega1 for nd in model.load_nodes()), default=1.0)

    def load(n, ph, q=False):
        d = (dem_q if q else dem_p).get(n)
        if d is None or d[ph] <= 0:
            return LinExpr()
        if "shed" not in relax:
            return LinExpr.of(float(d[ph]))
        if (n, ph) not in shed:
            shed[n, ph] = prog.add_var(f"shed[{n},{ph}]", 0.0, 1.0)
            prog.add_objective(shed[n, ph], SHED_COST * model.nodes[n].omega1 / top
                               * dem_p[n][ph] / sb)
        return LinExpr.of(float(d[ph])) - shed[n, ph] * float(d[ph])

    gen_p = {(n, ph): LinExpr() for n in nodes for ph in range(3)}
    gen_q = {(n, ph): LinExpr() for n in nodes for ph in range(3)}
    pv, es, dg = {}, {}, {}
    K = params.knots
    for g in model.generators.values():
        if g.node not in live:
            continue
        phs = np.flatnonzero(g.mask)
        sp = g.s_kva / len(phs)
        if g.kind == "PV-UC":
            for ph in phs:
                gen_p[g.node, ph].iadd(inp.pv_avail[g.id] / len(phs))
        elif g.kind == "PV-C":
            cap = plan.pv_cap(g.id) if g.id in plan.pv else np.zeros(3)
            av = inp.pv_avail[g.id] / len(phs)
            for ph in phs:
                ub = float(min(av, cap[ph]))
                p = prog.add_var(f"ppv[{g.id},{ph}]", 0.0, max(ub, 0.0))
                q = prog.add_var(f"qpv[{g.id},{ph}]", -sp, sp)
                add_hexagon(prog, p, q, sp, params.tau, (1, 4), f"hexpv[{g.id},{ph}]")
                gen_p[g.node, ph].iadd(p)
                gen_q[g.node, ph].iadd(q)
                pv[g.id, ph] = (p, q)
                add_squared_deviation(prog, p * (1.0 / sb), av / sb, 1.0,
                                      symmetric_knots(max(sp, 1.0) / sb, K), f"sqpv[{g.id},{ph}]")
        elif g.kind == "ES":
            s0 = inp.soc[g.id]
            tot = LinExpr()
            for ph in phs:
                p = prog.add_var(f"pes[{g.id},{ph}]", -sp, sp)
                q = prog.add_var(f"qes[{g.id},{ph}]", -sp, sp)
                add_hexagon(prog, p, q, sp, params.tau, name=f"hexes[{g.id},{ph}]")
                gen_p[g.node, ph].iadd(p)
                gen_q[g.node, ph].iadd(q)
                es[g.id, ph] = (p, q)
                tot.iadd(p)
                if not g.grid_forming and g.id in plan.es_p:
                    d = prog.add_var(f"des[{g.id},{ph}]", 0.0, np.inf)
                    ref = float(plan.es_p[g.id][h, ph])
                    prog.ge(d - p, -ref)
                    prog.ge(d + p, ref)
                    prog.add_objective(d, ES_MOVE / sb)
            # state of charge after the step stays in the operational band
            k = 100.0 * DK / g.e_kwh
            prog.le(tot * k, s0 - min(lo_op[g.id], s0), f"soclo[{g.id}]")
            prog.ge(tot * k, s0 - max(hi_op[g.id], s0), f"sochi[{g.id}]")
        elif g.kind == "DG" and g.id in plan.dg_p:
            for ph in phs:
                ref_p, ref_q = float(plan.dg_p[g.id][ph]), float(plan.dg_q[g.id][ph])
                if "dg" in relax:
                    p = prog.add_var(f"pdg[{g.id},{ph}]", 0.0, ref_p)
                    q = prog.add_var(f"qdg[{g.id},{ph}]", g.q_min / len(phs), g.q_max / len(phs))
                    add_hexagon(prog, p, q, sp, params.tau, (1, 4), f"hexdg[{g.id},{ph}]")
                else:
                    p = prog.add_var(f"pdg[{g.id},{ph}]", ref_p, ref_p)
                    q = prog.add_var(f"qdg[{g.id},{ph}]", ref_q, ref_q)
                gen_p[g.node, ph].iadd(p)
                gen_q[g.node, ph].iadd(q)
                dg[g.id, ph] = (p, q)

    # network: signed flows, exact voltage law on every energized line
    fp, fq, v = {}, {}, {}
    vlo, vhi = params.v_min ** 2, params.v_max ** 2
    for n in nodes:
        for ph in np.flatnonzero(model.nodes[n].mask):
            if n == root:
                v[n, ph] = prog.add_var(f"v[{n},{ph}]", params.v_slack ** 2, params.v_slack ** 2)
            else:
                v[n, ph] = prog.add_var(f"v[{n},{ph}]", vlo, vhi)
    for e, ch in child_of.items():
        ed = model.edges[e]
        for ph in np.flatnonzero(ed.mask):
            fp[e, ph] = prog.add_var(f"p[{e},{ph}]", -ed.p_max[ph], ed.p_max[ph])
            fq[e, ph] = prog.add_var(f"q[{e},{ph}]", -ed.q_max[ph], ed.q_max[ph])
        par = model.parent_of(ch)
        A, B = sens.A[e], sens.B[e]
        for ph in np.flatnonzero(ed.mask & model.nodes[ch].mask):
            drop = LinExpr()
            for ps in np.flatnonzero(ed.mask):
                drop.iadd(fp[e, ps], A[ph, ps] / sb)
                drop.iadd(fq[e, ps], B[ph, ps] / sb)
            prog.eq(v[ch, ph] - v[par, ph] - drop, 0.0, f"vlaw[{e},{ph}]")
    kids = model.children()
    for n in nodes:
        for ph in np.flatnonzero(model.nodes[n].mask):
            bp = gen_p[n, ph] - load(n, ph)
            bq = gen_q[n, ph] - load(n, ph, q=True)
            if n != root and model.edges[model.parent_edge[n]].mask[ph]:
                bp = bp + fp[model.parent_edge[n], ph]
                bq = bq + fq[model.parent_edge[n], ph]
            for c in kids.get(n, []):
                e = model.parent_edge[c]
                if c in live and model.edges[e].mask[ph]:
                    bp = bp - fp[e, ph]
                    bq = bq - fq[e, ph]
            prog.eq(bp, 0.0, f"balp[{n},{ph}]")
            prog.eq(bq, 0.0, f"balq[{n},{ph}]")
    return prog, dict(pv=pv, es=es, dg=dg, v=v, shed=shed, dem_p=dem_p, gf=gf.id)


def solve_rt(model: NetworkModel, sens: LineSensitivity, inp: RtInputs,
             params: Params = Params()) -> RtDispatch:
    """Fallbacks: DG may drop below its hourly value, then loads may be shed.
    Infeasible after both means the microgrid is switched off."""
    wall = 0.0
    for relax in ((), ("dg",), ("dg", "shed")):
        prog, h = build_rt(model, sens, inp, params, relax)
        sol = solve(prog, time_limit=params.time_limit, gap=params.gap, backend=params.backend,
                    iis=False)
        wall += sol.wall_time
        if not sol.ok:
            continue
        x = sol.x

        def put(store, key, val):
            gid, ph = key
            store.setdefault(gid, np.zeros(3))[ph] = val

        pv, pvq, esp, esq, dgp, dgq = {}, {}, {}, {}, {}, {}
        for k, (p, q) in h["pv"].items():
            put(pv, k, x[p.index])
            put(pvq, k, x[q.index])
        for k, (p, q) in h["es"].items():
            put(esp, k, x[p.index])
            put(esq, k, x[q.index])
        for k, (p, q) in h["dg"].items():
            put(dgp, k, x[p.index])
            put(dgq, k, x[q.index])
        served = {}
        for n, d in h["dem_p"].items():
            served[n] = (d > 0).astype(float)
        for (n, ph), var in h["shed"].items():
            served[n][ph] = 1.0 - x[var.index]
        v2 = {}
        for (n, ph), var in h["v"].items():
            v2.setdefault(n, np.full(3, np.nan))[ph] = x[var.index]
        if relax:
            log.info("RT hour %d step %d needed %s", inp.hour, inp.step, relax)
        return RtDispatch(sol.status, pv, pvq, esp, esq, dgp, dgq, served, v2, sol.objective,
                          wall, list(relax))
    log.warning("RT hour %d step %d infeasible; switching the microgrid off", inp.hour, inp.step)
    return RtDispatch("infeasible", {}, {}, {}, {}, {}, {}, {}, wall_time=wall,
                      relaxations=["dg", "shed"], cmg_off=True)
