"""Near-real-time stage: one hour, four 15-minute slots, unbalanced
LinDistFlow with demand-response switching.

Loads are switched per (zone, phase) for the whole hour. Because the switch
variables are binary, the squared weighted-load objective is written exactly:
x^2 = x and the cross products x_a x_b become y <= x_a, y <= x_b (the
objective pushes y up). Deviation terms use chord epigraphs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Params
from .forecast import Profile
from .grid import NetworkModel
from .lindist import LineSensitivity
from .opt import BINARY, LinExpr, Program, add_hexagon, add_squared_deviation, lsum, solve
from .opt.approx import symmetric_knots
from .recourse import RecourseTerm

log = logging.getLogger(__name__)

SLOTS = 4
DH = 0.25  # hours per slot


@dataclass
class NrtInputs:
    hour: int
    nodes: list[str]                       # energized nodes
    forecast: Profile                      # 15-minute, first four steps used
    soc0: dict[str, float]
    fuel0: dict[str, float]
    dg_last: dict[str, float]
    eds_load: dict[str, float]             # expected hourly allocation per load node, kW
    eds_dg: dict[str, float]
    eds_soc_end: dict[str, float]
    recourse: RecourseTerm | None = None   # None disables the resiliency cut
    pinned: set = field(default_factory=set)
    omega2: dict[str, float] = field(default_factory=dict)
    clpu: dict[str, tuple] = field(default_factory=dict)   # node -> (extra p, extra q) per phase


@dataclass
class NrtPlan:
    hour: int
    status: str
    nodes: list[str]
    x: dict[tuple[str, int], int]
    served: dict[str, np.ndarray]          # (4, 3) kW
    served_q: dict[str, np.ndarray]
    demand: dict[str, np.ndarray]          # (4, 3) forecast plus pickup surge, kW
    demand_q: dict[str, np.ndarray]
    pv: dict[str, np.ndarray]              # (4, 3)
    es_p: dict[str, np.ndarray]            # (4, 3)
    es_q: dict[str, np.ndarray]
    soc: dict[str, np.ndarray]             # (5,) start plus end of each slot
    dg_p: dict[str, np.ndarray]            # (3,) per phase, whole hour
    dg_q: dict[str, np.ndarray]
    fuel_end: dict[str, float]
    v2: dict[str, np.ndarray]              # (4, 3)
    flow_p: dict[str, np.ndarray]          # (4, 3) parent to child, kW
    rho: dict[str, np.ndarray]             # (4, 2)
    delta_d: np.ndarray
    cut_cap: float | None = None
    cut_slack: np.ndarray | None = None
    objective: float = np.nan
    wall_time: float = 0.0
    relaxations: list[str] = field(default_factory=list)
    cmg_off: bool = False
    dg_off: list[str] = field(default_factory=list)

    def pv_cap(self, unit: str) -> np.ndarray:
        """Per-phase bound for the 5-minute stage: largest slot value in the hour."""
        return self.pv[unit].max(axis=0)


def load_weights(model: NetworkModel, omega2: dict[str, float]) -> dict[str, float]:
    """omega1 * omega2 normalised by the largest non-critical omega1, so the
    best non-critical load carries weight one against the deviation terms."""
    ncl = [n.omega1 for n in model.load_nodes() if n.load_class == "NCL"]
    top = max(ncl or [n.omega1 for n in model.load_nodes()] or [1.0])
    return {n.id: n.omega1 * omega2.get(n.id, 1.0) / top for n in model.load_nodes()}


@dataclass
class _Build:
    prog: Program
    x: dict
    pdem: dict
    qdem: dict
    keys_of: dict
    pv: dict
    es: dict
    soc: dict
    dg: dict
    v: dict
    pf: dict
    pb: dict
    q: dict
    rho: dict
    delta: list
    cut: list
    cap: float | None
    edges: list
    dg_off: list


def build_nrt(model: NetworkModel, sens: LineSensitivity, inp: NrtInputs,
              params: Params = Params(), relax: tuple[str, ...] = ()) -> _Build:
    if inp.forecast.resolution_min != 15 or inp.forecast.steps < SLOTS:
        raise ValueError("NRT needs a 15-minute forecast covering the hour")
    sb = model.base.s_phase
    live = set(inp.nodes)
    nodes = [n for n in model.node_order if n in live]
    root = model.root
    if root not in live:
        raise ValueError("the grid-forming node must be energized")
    child_of = {model.parent_edge[n]: n for n in nodes if n != root}
    edges = list(child_of)
    fidx = {nid: i for i, nid in enumerate(inp.forecast.node_ids)}
    uidx = {u: i for i, u in enumerate(inp.forecast.unit_ids)}
    prog = Program(name=f"nrt_h{inp.hour}", sense="max")
    vr = 0.01 if "voltage" in relax else 0.0
    vlo, vhi = (params.v_min * (1 - vr)) ** 2, (params.v_max * (1 + vr)) ** 2

    # demand and switching -------------------------------------------------
    pdem, qdem = {}, {}
    for n in nodes:
        nd = model.nodes[n]
        if not nd.has_load:
            continue
        i = fidx[n]
        ep, eq = inp.clpu.get(n, (np.zeros(3), np.zeros(3)))
        pdem[n] = (inp.forecast.p[:SLOTS, i, :] + ep[None, :]) * nd.mask[None, :]
        qdem[n] = (inp.forecast.q[:SLOTS, i, :] + eq[None, :]) * nd.mask[None, :]
    keys_of: dict[str, list[tuple[str, int]]] = {}
    zone_cl: dict[str, bool] = {}
    for n in pdem:
        nd = model.nodes[n]
        keys_of[n] = [(nd.dr_zone, ph) for ph in range(3) if nd.mask[ph] and nd.p_kw[ph] > 0]
        zone_cl[nd.dr_zone] = zone_cl.get(nd.dr_zone, False) or nd.load_class == "CL"
    x = {}
    for n in pdem:
        for key in keys_of[n]:
            if key in x:
                continue
            x[key] = prog.add_var(f"x[{key[0]},{key[1]}]", 0, 1, BINARY)
            if (zone_cl[key[0]] and "cl" not in relax) or key in inp.pinned:
                prog.fix(x[key], 1.0)

    def load_expr(n, h, ph, q=False):
        dem = qdem if q else pdem
        key = (model.nodes[n].dr_zone, ph)
        if key not in x:
            return LinExpr()
        return x[key] * float(dem[n][h, ph])

    # objective: squared weighted load, exact for binary switches ------------
    om2 = {} if "equity" in relax else inp.omega2
    w = load_weights(model, om2)
    obj = LinExpr()
    marg = {}
    ycache = {}
    for n in pdem:
        ks = keys_of[n]
        wn2 = params.w_load * w[n] ** 2
        for h in range(SLOTS):
            c = {k[1]: pdem[n][h, k[1]] / sb for k in ks}
            for k in ks:
                obj.iadd(x[k], wn2 * c[k[1]] ** 2)
            for a in range(len(ks)):
                for b in range(a + 1, len(ks)):
                    ka, kb = ks[a], ks[b]
                    if (ka, kb) not in ycache:
                        y = prog.add_var(f"y[{ka[0]},{ka[1]},{kb[1]}]", 0.0, 1.0)
                        prog.le(y - x[ka], 0.0)
                        prog.le(y - x[kb], 0.0)
                        ycache[ka, kb] = y
                    obj.iadd(ycache[ka, kb], 2 * wn2 * c[ka[1]] * c[kb[1]])
        umax = float(pdem[n].sum(axis=1).max()) / sb
        marg[n] = 2 * wn2 * umax

    # lines and voltages -------------------------------------------------------
    v, pf, pb, qq, rho = {}, {}, {}, {}, {}
    for n in nodes:
        for ph in np.flatnonzero(model.nodes[n].mask):
            for h in range(SLOTS):
                if n == root:
                    v[n, ph, h] = prog.add_var(f"v[{n},{ph},{h}]", params.v_slack ** 2,
                                               params.v_slack ** 2)
                else:
                    v[n, ph, h] = prog.add_var(f"v[{n},{ph},{h}]", vlo, vhi)
    for e in edges:
        ed = model.edges[e]
        for h in range(SLOTS):
            rf = prog.add_var(f"rho_f[{e},{h}]", 0, 1, BINARY)
            rb = prog.add_var(f"rho_b[{e},{h}]", 0, 1, BINARY)
            # both ends are energized, so the line is in service in one direction
            prog.eq(rf + rb, 1.0, f"rho[{e},{h}]")
            rho[e, h] = (rf, rb)
            for ph in np.flatnonzero(ed.mask):
                pmax, qmax = float(ed.p_max[ph]), float(ed.q_max[ph])
                a = prog.add_var(f"pf[{e},{ph},{h}]", 0.0, pmax)
                b = prog.add_var(f"pb[{e},{ph},{h}]", 0.0, pmax)
                prog.le(a - rf * pmax, 0.0)
                prog.le(b - rb * pmax, 0.0)
                pf[e, ph, h], pb[e, ph, h] = a, b
                qq[e, ph, h] = prog.add_var(f"q[{e},{ph},{h}]", -qmax, qmax)
        A, B = sens.A[e], sens.B[e]
        ch = child_of[e]
        par = model.parent_of(ch)
        phs = [ph for ph in np.flatnonzero(ed.mask) if model.nodes[ch].mask[ph]]
        for h in range(SLOTS):
            rf, rb = rho[e, h]
            for ph in phs:
                z = prog.add_var(f"zeta[{e},{ph},{h}]", -vhi, vhi)
                drop = LinExpr()
                for ps in np.flatnonzero(ed.mask):
                    drop.iadd(pf[e, ps, h] - pb[e, ps, h], A[ph, ps] / sb)
                    drop.iadd(qq[e, ps, h], B[ph, ps] / sb)
                prog.eq(v[ch, ph, h] - v[par, ph, h] - drop - z, 0.0, f"vlaw[{e},{ph},{h}]")
                prog.le(z + (rf + rb) * vhi, vhi)
                prog.ge(z - (rf + rb) * vhi, -vhi)

    # generation -----------------------------------------------------------------
    gen_p = {(n, ph, h): LinExpr() for n in nodes for ph in range(3) for h in range(SLOTS)}
    gen_q = {(n, ph, h): LinExpr() for n in nodes for ph in range(3) for h in range(SLOTS)}
    pv, es, soc, dg = {}, {}, {}, {}
    lo, hi = params.soc_sched
    dg_off = []
    for g in model.generators.values():
        if g.node not in live:
            continue
        phs = np.flatnonzero(g.mask)
        sp = g.s_kva / len(phs)
        if g.kind in ("PV-C", "PV-UC"):
            avail = inp.forecast.pv[:SLOTS, uidx[g.id]] / len(phs)
            for h in range(SLOTS):
                for ph in phs:
                    if g.kind == "PV-UC":
                        gen_p[g.node, ph, h].iadd(float(avail[h]))
                        continue
                    p = prog.add_var(f"ppv[{g.id},{ph},{h}]", 0.0, float(avail[h]))
                    q = prog.add_var(f"qpv[{g.id},{ph},{h}]", -sp, sp)
                    add_hexagon(prog, p, q, sp, params.tau, (1, 4), f"hexpv[{g.id},{ph},{h}]")
                    gen_p[g.node, ph, h].iadd(p)
                    gen_q[g.node, ph, h].iadd(q)
                    pv[g.id, ph, h] = p
        elif g.kind == "ES":
            s0 = inp.soc0[g.id]
            prev = LinExpr.of(s0)
            for h in range(SLOTS):
                tot = LinExpr()
                for ph in phs:
                    p = prog.add_var(f"pes[{g.id},{ph},{h}]", -sp, sp)
                    q = prog.add_var(f"qes[{g.id},{ph},{h}]", -sp, sp)
                    add_hexagon(prog, p, q, sp, params.tau, name=f"hexes[{g.id},{ph},{h}]")
                    gen_p[g.node, ph, h].iadd(p)
                    gen_q[g.node, ph, h].iadd(q)
                    es[g.id, ph, h] = (p, q)
                    tot.iadd(p)
                so = prog.add_var(f"soc[{g.id},{h}]", min(lo, s0), max(hi, s0))
                prog.eq(so - prev + tot * (100.0 * DH / g.e_kwh), 0.0, f"socrec[{g.id},{h}]")
                soc[g.id, h] = so
                prev = LinExpr.of(so)
        elif g.kind == "DG":
            f0 = inp.fuel0[g.id]
            if f0 - g.beta * g.p_max - g.alpha * g.p_min < g.fuel_min:
                dg_off.append(g.id)
                continue
            ps, qs = [], []
            for ph in phs:
                p = prog.add_var(f"pdg[{g.id},{ph}]", 0.0, g.p_max / len(phs))
                q = prog.add_var(f"qdg[{g.id},{ph}]", g.q_min / len(phs), g.q_max / len(phs))
                add_hexagon(prog, p, q, sp, params.tau, (1, 4), f"hexdg[{g.id},{ph}]")
                ps.append(p)
                qs.append(q)
                for h in range(SLOTS):
                    gen_p[g.node, ph, h].iadd(p)
                    gen_q[g.node, ph, h].iadd(q)
            dbar = params.dg_imbalance_frac * sp
            for j in range(len(ps)):
                d = ps[j] - ps[(j + 1) % len(ps)]
                if len(ps) > 1:
                    prog.le(d, dbar, f"dgimb_up[{g.id},{j}]")
                    prog.ge(d, -dbar, f"dgimb_lo[{g.id},{j}]")
            tot = lsum(ps)
            prog.ge(tot, g.p_min, f"dgmin[{g.id}]")
            prog.le(tot, g.p_max, f"dgmax[{g.id}]")
            if np.isfinite(g.ramp):
                prog.le(tot, inp.dg_last.get(g.id, 0.0) + g.ramp, f"dgramp_up[{g.id}]")
                prog.ge(tot, inp.dg_last.get(g.id, 0.0) - g.ramp, f"dgramp_dn[{g.id}]")
            prog.ge(-(tot * g.alpha), g.fuel_min - f0 + g.beta * g.p_max, f"fuel[{g.id}]")
            dg[g.id] = (ps, qs)

    # nodal balance per phase and slot ----------------------------------------
    for n in nodes:
        nd = model.nodes[n]
        kids = [c for c in model.children().get(n, []) if c in live]
        for ph in np.flatnonzero(nd.mask):
            for h in range(SLOTS):
                bal_p = gen_p[n, ph, h] - load_expr(n, h, ph)
                bal_q = gen_q[n, ph, h] - load_expr(n, h, ph, q=True)
                if n != root:
                    e = model.parent_edge[n]
                    if model.edges[e].mask[ph]:
                        bal_p = bal_p + pf[e, ph, h] - pb[e, ph, h]
                        bal_q = bal_q + qq[e, ph, h]
                for c in kids:
                    e = model.parent_edge[c]
                    if model.edges[e].mask[ph]:
                        bal_p = bal_p - pf[e, ph, h] + pb[e, ph, h]
                        bal_q = bal_q - qq[e, ph, h]
                prog.eq(bal_p, 0.0, f"balp[{n},{ph},{h}]")
                prog.eq(bal_q, 0.0, f"balq[{n},{ph},{h}]")

    # network phase imbalance ----------------------------------------------------
    delta = []
    K = params.knots
    span = max(float(max((pdem[n][:, ph].sum() for n in pdem for ph in range(3)),
                         default=0.0)), 1.0) / sb
    for h in range(SLOTS):
        tot = [lsum(load_expr(n, h, ph) for n in pdem) * (1.0 / sb) for ph in range(3)]
        mean = lsum(tot) * (1.0 / 3.0)
        d = prog.add_var(f"deltaD[{h}]", 0.0, np.inf)
        for ph in range(3):
            prog.ge(d - tot[ph] + mean, 0.0)
            prog.ge(d + tot[ph] - mean, 0.0)
        add_squared_deviation(prog, d, 0.0, params.w_imbalance, symmetric_knots(span, K),
                              f"sq_imb[{h}]")
        delta.append(d)

    # coupling to the scheduling stage --------------------------------------------
    for gid, (ps, _) in dg.items():
        g = model.generators[gid]
        add_squared_deviation(prog, lsum(ps) * (1.0 / sb), inp.eds_dg.get(gid, 0.0) / sb,
                              params.w_dg * SLOTS, symmetric_knots(g.p_max / sb, K),
                              f"sq_dg[{gid}]")
    for g in model.gens("ES"):
        if (g.id, SLOTS - 1) not in soc or g.id not in inp.eds_soc_end:
            continue
        k = g.e_kwh / (100.0 * DH * sb)
        add_squared_deviation(prog, soc[g.id, SLOTS - 1] * k, inp.eds_soc_end[g.id] * k,
                              params.w_soc, symmetric_knots(10.0 * k, K), f"sq_soc[{g.id}]")

    # resiliency cut from delayed recourse ---------------------------------------
    cut, cap = [], None
    if inp.recourse is not None:
        cap = sum(inp.eds_load.get(n, 0.0) for n in pdem) - inp.recourse.reduction
        # the cut must outweigh every other marginal in the objective, or the
        # solver buys slack instead of curtailing load
        slopes = [2.0 * pt.weight * float(np.abs(pt.knots).max()) for pt in prog.pwl_parts]
        mu = params.mu_factor * max([marg[n] for n in marg
                                     if model.nodes[n].load_class == "NCL"] + slopes + [1e-3])
        for h in range(SLOTS):
            sl = prog.add_var(f"cut_slack[{h}]", 0.0, np.inf)
            total = lsum(load_expr(n, h, ph) for n in pdem for ph in range(3))
            prog.le(total - sl, cap, f"cut[{h}]")
            obj.iadd(sl, -mu / sb)
            cut.append(sl)
    prog.add_objective(obj)
    return _Build(prog, x, pdem, qdem, keys_of, pv, es, soc, dg, v, pf, pb, qq, rho, delta, cut,
                  cap, edges, dg_off)


def _extract(model, b: _Build, inp: NrtInputs, sol) -> NrtPlan:
    xv = sol.x
    val = lambda e: float(LinExpr.of(e).value(xv))  # noqa: E731
    x = {k: int(round(xv[v.index])) for k, v in b.x.items()}
    served, served_q = {}, {}
    for n in b.pdem:
        on = np.zeros(3)
        for z, ph in b.keys_of[n]:
            on[ph] = x[z, ph]
        served[n] = b.pdem[n] * on[None, :]
        served_q[n] = b.qdem[n] * on[None, :]
    pv, es_p, es_q, soc, dg_p, dg_q, fuel = {}, {}, {}, {}, {}, {}, {}
    for (gid, ph, h), var in b.pv.items():
        pv.setdefault(gid, np.zeros((SLOTS, 3)))[h, ph] = xv[var.index]
    for (gid, ph, h), (p, q) in b.es.items():
        es_p.setdefault(gid, np.zeros((SLOTS, 3)))[h, ph] = xv[p.index]
        es_q.setdefault(gid, np.zeros((SLOTS, 3)))[h, ph] = xv[q.index]
    for gid in es_p:
        soc[gid] = np.r_[inp.soc0[gid], [xv[b.soc[gid, h].index] for h in range(SLOTS)]]
    for gid, (ps, qs) in b.dg.items():
        g = model.generators[gid]
        phs = np.flatnonzero(g.mask)
        dg_p[gid], dg_q[gid] = np.zeros(3), np.zeros(3)
        dg_p[gid][phs] = [xv[p.index] for p in ps]
        dg_q[gid][phs] = [xv[q.index] for q in qs]
        fuel[gid] = inp.fuel0[gid] - (g.alpha * dg_p[gid].sum() + g.beta * g.p_max)
    v2 = {}
    for (n, ph, h), var in b.v.items():
        v2.setdefault(n, np.full((SLOTS, 3), np.nan))[h, ph] = xv[var.index]
    flow = {}
    for (e, ph, h), var in b.pf.items():
        flow.setdefault(e, np.zeros((SLOTS, 3)))[h, ph] = xv[var.index] - xv[b.pb[e, ph, h].index]
    rho = {e: np.array([[round(xv[b.rho[e, h][0].index]), round(xv[b.rho[e, h][1].index])]
                        for h in range(SLOTS)]) for e in b.edges}
    return NrtPlan(hour=inp.hour, status=sol.status, nodes=list(inp.nodes), x=x, served=served,
                   served_q=served_q, demand=b.pdem, demand_q=b.qdem, pv=pv, es_p=es_p,
                   es_q=es_q, soc=soc, dg_p=dg_p, dg_q=dg_q, fuel_end=fuel, v2=v2, flow_p=flow,
                   rho=rho, delta_d=np.array([val(d) for d in b.delta]),
                   cut_cap=b.cap, cut_slack=np.array([val(s) for s in b.cut]) if b.cut else None,
                   objective=sol.objective, wall_time=sol.wall_time, dg_off=list(b.dg_off))


LADDER = ((), ("equity",), ("equity", "voltage"), ("equity", "voltage", "cl"))


def solve_nrt(model: NetworkModel, sens: LineSensitivity, inp: NrtInputs,
              params: Params = Params()) -> NrtPlan:
    """Solve with the fallback ladder. If every rung fails the returned plan
    carries ``cmg_off=True`` and no dispatch."""
    wall = 0.0
    for relax in LADDER:
        b = build_nrt(model, sens, inp, params, relax)
        sol = solve(b.prog, time_limit=params.time_limit, gap=params.gap,
                    backend=params.backend, iis=False)
        wall += sol.wall_time
        if sol.ok:
            plan = _extract(model, b, inp, sol)
            plan.relaxations = list(relax)
            plan.wall_time = wall
            if relax:
                log.info("NRT hour %d solved after relaxing %s", inp.hour, relax)
            return plan
    log.warning("NRT hour %d infeasible on every fallback; recommending CMG off", inp.hour)
    return NrtPlan(hour=inp.hour, status="infeasible", nodes=list(inp.nodes), x={}, served={},
                   served_q={}, demand={}, demand_q={}, pv={}, es_p={}, es_q={}, soc={}, dg_p={},
                   dg_q={}, fuel_end={}, v2={}, flow_p={}, rho={}, delta_d=np.zeros(SLOTS),
                   wall_time=wall, relaxations=list(LADDER[-1]), cmg_off=True)
