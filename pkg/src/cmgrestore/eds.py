"""Extended-duration scheduling: hourly stochastic receding-horizon MILP on the
single-phase aggregate of the feeder.

Decides which node groups the microgrid energizes each hour (theta), the
scenario-wise load allocation, storage trajectories and the scenario-free
diesel schedule.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .config import Params
from .forecast import ScenarioSet
from .grid import AggregatedModel, NetworkModel, aggregate_single_phase
from .opt import (BINARY, LinExpr, Program, add_chance_gate, add_chance_indicator, add_hexagon,
                  lsum, solve)

log = logging.getLogger(__name__)


class EdsStateError(ValueError):
    pass


class EdsInfeasible(RuntimeError):
    pass


@dataclass
class EdsState:
    hour: int                      # hours elapsed since the outage started
    end: int                       # outage length in hours
    soc: dict[str, float]          # %
    fuel: dict[str, float]         # litres
    dg_last: dict[str, float]      # kW delivered in the previous hour
    theta_hist: dict[int, list[int]] = field(default_factory=dict)

    @property
    def remaining(self) -> int:
        return self.end - self.hour

    @classmethod
    def initial(cls, model: NetworkModel, duration: int) -> "EdsState":
        soc = {g.id: g.soc_init for g in model.gens("ES")}
        fuel = {g.id: g.fuel_init for g in model.gens("DG")}
        dg = {g.id: 0.0 for g in model.gens("DG")}
        hist = {n: ([1] if n == 1 else [0]) for n in model.groups}
        return cls(0, duration, soc, fuel, dg, hist)


@dataclass
class EdsPlan:
    status: str
    hours: np.ndarray                          # absolute hour index of each column
    theta: dict[int, np.ndarray]
    load: dict[str, np.ndarray]                # expected allocation per load node (kW)
    load_scen: np.ndarray                      # (T, S, loads)
    dg_p: dict[str, np.ndarray]
    dg_q: dict[str, np.ndarray]
    es_p: dict[str, np.ndarray]                # expected
    soc: dict[str, np.ndarray]                 # expected SOC at the end of each hour
    fuel: dict[str, np.ndarray]
    pv_p: dict[str, np.ndarray]
    objective: float = np.nan
    wall_time: float = 0.0
    relaxations: list[str] = field(default_factory=list)
    balance_residual: float = 0.0              # worst scenario-hour mismatch, pu
    load_ids: list[str] = field(default_factory=list)

    def expected_total(self, t: int = 0) -> float:
        return float(sum(v[t] for v in self.load.values()))

    def ng_load(self, model: NetworkModel, n: int, t: int = 0) -> float:
        return float(sum(v[t] for i, v in self.load.items() if model.nodes[i].ng == n))


def _ng_class(agg: AggregatedModel, n: int) -> str:
    return "CL" if agg.groups[n].has_critical_load else "NCL"


@dataclass
class EdsBuild:
    prog: Program
    T: int
    S: int
    theta: dict
    pd: dict
    pv: dict
    pv_uc: dict
    pes: dict
    soc: dict
    pdg: dict
    qdg: dict
    fuel: dict
    load_ids: list
    probs: np.ndarray
    fc: np.ndarray          # (T, S, loads) forecast kW
    pv_fc: np.ndarray       # (T, S, units)
    unit_ids: list


def build_eds(state: EdsState, model: NetworkModel, scenarios: ScenarioSet,
              params: Params = Params(), relax: tuple[str, ...] = ()) -> EdsBuild:
    agg = aggregate_single_phase(model)
    T = state.remaining
    if T < 1:
        raise EdsStateError("no hours left in the horizon")
    S = len(scenarios)
    if scenarios.scenarios[0].steps < T or scenarios.scenarios[0].resolution_min != 60:
        raise EdsStateError("scenario set must be hourly and cover the remaining horizon")
    lo, hi = params.soc_sched
    for g in model.gens("ES"):
        if not lo - 1e-9 <= state.soc[g.id] <= hi + 1e-9:
            raise EdsStateError(f"{g.id} SOC {state.soc[g.id]:.2f}% outside [{lo}, {hi}]")
    for g in model.gens("DG"):
        if not g.fuel_min - 1e-9 <= state.fuel[g.id] <= g.fuel_max + 1e-9:
            raise EdsStateError(f"{g.id} fuel {state.fuel[g.id]:.1f} L outside limits")

    gam, tau = params.gamma, params.tau
    prog = Program(name=f"eds_h{state.hour}", sense="max")
    probs = scenarios.probabilities
    idx = {nid: i for i, nid in enumerate(scenarios.scenarios[0].node_ids)}
    load_ids = [ld.node for ld in agg.loads]
    fc = np.stack([sc.p[:T][:, [idx[i] for i in load_ids], :].sum(axis=2)
                   for sc in scenarios.scenarios], axis=1)          # (T, S, L)
    pf = {ld.node: (ld.q_kvar / ld.p_kw if ld.p_kw > 0 else 0.0) for ld in agg.loads}
    uidx = {u: k for k, u in enumerate(scenarios.scenarios[0].unit_ids)}
    unit_ids = list(uidx)
    pv_fc = np.stack([sc.pv[:T] for sc in scenarios.scenarios], axis=1)  # (T, S, U)
    ng_of = {ld.node: ld.ng for ld in agg.loads}
    ldcls = {ld.node: ld.load_class for ld in agg.loads}
    w1 = {ld.node: ld.omega1 for ld in agg.loads}

    # node group connectivity -----------------------------------------------
    theta = {}
    for n in sorted(agg.groups):
        theta[n] = []
        for t in range(T):
            lb = 1.0 if n == 1 else 0.0
            theta[n].append(prog.add_var(f"theta[{n},{t}]", lb, 1.0, BINARY))
    for par, ch in agg.ancestry:
        for t in range(T):
            prog.ge(theta[par][t] - theta[ch][t], 0.0, f"anc[{par},{ch},{t}]")
    ups = params.msd_hours
    for n in agg.groups:
        if n == 1:
            continue
        hist = state.theta_hist.get(n, [0])
        prev = hist[-1]
        run = 0
        for v in reversed(hist):
            if not v:
                break
            run += 1
        # a connection that began inside the recorded history and is still short
        if 0 < run < ups and run < len(hist):
            for t in range(min(ups - run, T)):
                prog.eq(theta[n][t], 1.0, f"msd_hist[{n},{t}]")
        for t in range(T):
            span = range(t, min(t + ups, T))
            rise = theta[n][t] - (theta[n][t - 1] if t else float(prev))
            prog.ge(lsum(theta[n][k] for k in span) - rise * len(span), 0.0, f"msd[{n},{t}]")

    # loads ---------------------------------------------------------------
    pd = {}
    cl_frac = 0.0 if "cl_min" in relax else params.cl_min_frac
    for j, i in enumerate(load_ids):
        n = ng_of[i]
        for t in range(T):
            for s in range(S):
                v = prog.add_var(f"pd[{i},{t},{s}]", 0.0, max(fc[t, s, j], 0.0))
                pd[i, t, s] = v
                prog.le(v - theta[n][t] * fc[t, s, j], 0.0, f"pd_ub[{i},{t},{s}]")
                if ldcls[i] == "CL" and cl_frac > 0:
                    prog.ge(v - theta[n][t] * (cl_frac * fc[t, s, j]), 0.0,
                            f"pd_lb[{i},{t},{s}]")

    # generators ----------------------------------------------------------
    pv, pv_uc, qpv = {}, {}, {}
    for g in model.gens("PV-C"):
        k = uidx[g.id]
        for t in range(T):
            for s in range(S):
                p = prog.add_var(f"ppv[{g.id},{t},{s}]", 0.0, pv_fc[t, s, k])
                q = prog.add_var(f"qpv[{g.id},{t},{s}]", -g.s_kva, g.s_kva)
                prog.le(p - theta[g.ng][t] * pv_fc[t, s, k], 0.0, f"pv_on[{g.id},{t},{s}]")
                prog.le(q - theta[g.ng][t] * g.s_kva, 0.0, f"qpv_on[{g.id},{t},{s}]")
                prog.ge(q + theta[g.ng][t] * g.s_kva, 0.0, f"qpv_on2[{g.id},{t},{s}]")
                add_hexagon(prog, p, q, g.s_kva, tau, (1, 4), f"hexpv[{g.id},{t},{s}]")
                pv[g.id, t, s], qpv[g.id, t, s] = p, q
    for g in model.gens("PV-UC"):
        k = uidx[g.id]
        for t in range(T):
            for s in range(S):
                pv_uc[g.id, t, s] = theta[g.ng][t] * float(pv_fc[t, s, k])

    pes, qes, soc = {}, {}, {}
    for g in model.gens("ES"):
        for s in range(S):
            prev = LinExpr.of(state.soc[g.id])
            for t in range(T):
                p = prog.add_var(f"pes[{g.id},{t},{s}]", -g.s_kva, g.s_kva)
                q = prog.add_var(f"qes[{g.id},{t},{s}]", 0.0, g.s_kva)
                th = theta[g.ng][t]
                prog.le(p * gam - th * g.s_kva, 0.0, f"es_up[{g.id},{t},{s}]")
                prog.ge(p * gam + th * g.s_kva, 0.0, f"es_lo[{g.id},{t},{s}]")
                prog.le(q * gam - th * g.s_kva, 0.0, f"esq_up[{g.id},{t},{s}]")
                add_hexagon(prog, p, q, g.s_kva, tau, (1, 2), f"hexes[{g.id},{t},{s}]")
                so = prog.add_var(f"soc[{g.id},{t},{s}]", lo, hi)
                prog.eq(so - prev + p * (100.0 / g.e_kwh), 0.0, f"soc_rec[{g.id},{t},{s}]")
                prev = LinExpr.of(so)
                pes[g.id, t, s], qes[g.id, t, s], soc[g.id, t, s] = p, q, so

    pdg, qdg, fuel = {}, {}, {}
    for g in model.gens("DG"):
        prevp = LinExpr.of(state.dg_last[g.id])
        prevf = LinExpr.of(state.fuel[g.id])
        relaxed = "dg_min" in relax
        pmin = 0.0 if relaxed else g.p_min
        for t in range(T):
            th = theta[g.ng][t]
            if relaxed:
                # emergency mode: the unit may stop even while its group is on
                u = prog.add_var(f"udg[{g.id},{t}]", 0.0, 1.0, BINARY)
                prog.le(u - th, 0.0, f"udg_on[{g.id},{t}]")
                th = u
            p = prog.add_var(f"pdg[{g.id},{t}]", 0.0, g.p_max)
            q = prog.add_var(f"qdg[{g.id},{t}]", min(g.q_min * gam, 0.0), g.q_max)
            prog.le(p - th * (g.p_max / gam), 0.0, f"dg_up[{g.id},{t}]")
            prog.ge(p - th * (gam * pmin), 0.0, f"dg_lo[{g.id},{t}]")
            prog.le(q - th * (g.q_max / gam), 0.0, f"dgq_up[{g.id},{t}]")
            prog.ge(q - th * (gam * g.q_min), 0.0, f"dgq_lo[{g.id},{t}]")
            add_hexagon(prog, p, q, g.s_kva, tau, (1, 4), f"hexdg[{g.id},{t}]")
            if np.isfinite(g.ramp):
                prog.le(p - prevp, g.ramp, f"ramp_up[{g.id},{t}]")
                prog.ge(p - prevp, -g.ramp, f"ramp_dn[{g.id},{t}]")
            f = prog.add_var(f"fuel[{g.id},{t}]", g.fuel_min, g.fuel_max)
            prog.eq(f - prevf + p * g.alpha + th * (g.beta * g.p_max), 0.0, f"fuel_rec[{g.id},{t}]")
            prevp, prevf = LinExpr.of(p), LinExpr.of(f)
            pdg[g.id, t], qdg[g.id, t], fuel[g.id, t] = p, q, f

    # balances --------------------------------------------------------------
    for t in range(T):
        for s in range(S):
            gen = LinExpr()
            gq = LinExpr()
            for g in model.gens("PV-C"):
                gen.iadd(pv[g.id, t, s])
                gq.iadd(qpv[g.id, t, s])
            for g in model.gens("PV-UC"):
                gen.iadd(pv_uc[g.id, t, s])
            for g in model.gens("ES"):
                gen.iadd(pes[g.id, t, s])
                gq.iadd(qes[g.id, t, s])
            for g in model.gens("DG"):
                gen.iadd(pdg[g.id, t])
                gq.iadd(qdg[g.id, t])
            ld = lsum(pd[i, t, s] for i in load_ids)
            lq = lsum(pd[i, t, s] * pf[i] for i in load_ids)
            prog.eq(gen - ld, 0.0, f"bal_p[{t},{s}]")
            prog.eq(gq - lq, 0.0, f"bal_q[{t},{s}]")

    # chance constraints on external node groups ------------------------------
    ext = [n for n in sorted(agg.groups) if n != 1]
    for t in range(T):
        if params.chance_mode == "summed" and ext:
            lhs, rhs, M = [], [], []
            for s in range(S):
                lhs.append(lsum(pd[i, t, s] for i in load_ids if ng_of[i] in ext))
                r = LinExpr()
                m = 0.0
                for n in ext:
                    eta = params.eta[_ng_class(agg, n)]
                    tot = float(sum(fc[t, s, j] for j, i in enumerate(load_ids) if ng_of[i] == n))
                    r.iadd(theta[n][t], eta * tot)
                    m += eta * tot
                rhs.append(r)
                M.append(max(m, 1e-6))
            phi, _ = add_chance_indicator(prog, lhs, rhs, probs, M, f"cc[{t}]")
            for n in ext:
                add_chance_gate(prog, phi, theta[n][t], params.eps[_ng_class(agg, n)],
                                f"cc_gate[{n},{t}]")
            continue
        for n in ext:
            members = [j for j, i in enumerate(load_ids) if ng_of[i] == n]
            if not members:
                continue
            cls = _ng_class(agg, n)
            eta, eps = params.eta[cls], params.eps[cls]
            tot = np.array([fc[t, s, members].sum() for s in range(S)])
            lhs = [lsum(pd[load_ids[j], t, s] for j in members) for s in range(S)]
            rhs = [float(eta * tot[s]) for s in range(S)]
            M = np.maximum(eta * tot, 1e-6)
            phi, _ = add_chance_indicator(prog, lhs, rhs, probs, M, f"cc[{n},{t}]")
            add_chance_gate(prog, phi, theta[n][t], eps, f"cc_gate[{n},{t}]")

    # objective -------------------------------------------------------------
    obj = LinExpr()
    for t in range(T):
        for s in range(S):
            for i in load_ids:
                obj.iadd(pd[i, t, s], probs[s] * w1[i])
    tb = params.eds_tiebreak
    if tb > 0:
        for g in model.gens("ES"):
            for t in range(T):
                for s in range(S):
                    obj.iadd(soc[g.id, t, s], tb * probs[s] * g.e_kwh / 100.0)
        for g in model.gens("DG"):
            for t in range(T):
                obj.iadd(fuel[g.id, t], tb / g.alpha)
    prog.add_objective(obj)
    return EdsBuild(prog, T, S, theta, pd, pv, pv_uc, pes, soc, pdg, qdg, fuel, load_ids, probs,
                    fc, pv_fc, unit_ids)


def extract_eds(b: EdsBuild, model: NetworkModel, sol, hour0: int) -> EdsPlan:
    T, S, pr = b.T, b.S, b.probs
    x = sol.x
    theta = {n: np.array([round(x[v.index]) for v in vs]) for n, vs in b.theta.items()}
    ls = np.zeros((T, S, len(b.load_ids)))
    for j, i in enumerate(b.load_ids):
        for t in range(T):
            for s in range(S):
                ls[t, s, j] = x[b.pd[i, t, s].index]
    load = {i: ls[:, :, j] @ pr for j, i in enumerate(b.load_ids)}
    dg_p = {g.id: np.array([x[b.pdg[g.id, t].index] for t in range(T)]) for g in model.gens("DG")}
    dg_q = {g.id: np.array([x[b.qdg[g.id, t].index] for t in range(T)]) for g in model.gens("DG")}
    fuel = {g.id: np.array([x[b.fuel[g.id, t].index] for t in range(T)]) for g in model.gens("DG")}
    es_p, soc = {}, {}
    for g in model.gens("ES"):
        P = np.array([[x[b.pes[g.id, t, s].index] for s in range(S)] for t in range(T)])
        C = np.array([[x[b.soc[g.id, t, s].index] for s in range(S)] for t in range(T)])
        es_p[g.id], soc[g.id] = P @ pr, C @ pr
    pv_p = {}
    for g in model.gens("PV-C"):
        P = np.array([[x[b.pv[g.id, t, s].index] for s in range(S)] for t in range(T)])
        pv_p[g.id] = P @ pr
    # scenario-hour balance audit straight from the extracted values
    worst = 0.0
    for t in range(T):
        for s in range(S):
            gen = sum(x[b.pv[g.id, t, s].index] for g in model.gens("PV-C"))
            gen += sum(b.pv_uc[g.id, t, s].value(x) for g in model.gens("PV-UC"))
            gen += sum(x[b.pes[g.id, t, s].index] for g in model.gens("ES"))
            gen += sum(x[b.pdg[g.id, t].index] for g in model.gens("DG"))
            worst = max(worst, abs(gen - ls[t, s].sum()) / model.base.s_phase)
    return EdsPlan(status=sol.status, hours=np.arange(hour0, hour0 + T), theta=theta, load=load,
                   load_scen=ls, dg_p=dg_p, dg_q=dg_q, es_p=es_p, soc=soc, fuel=fuel, pv_p=pv_p,
                   objective=sol.objective, wall_time=sol.wall_time, balance_residual=worst,
                   load_ids=list(b.load_ids))


LADDER = ((), ("cl_min",), ("cl_min", "dg_min"))


def solve_eds(state: EdsState, model: NetworkModel, scenarios: ScenarioSet,
              params: Params = Params()) -> EdsPlan:
    """Build and solve, walking the relaxation ladder on infeasibility."""
    wall = 0.0
    tried = []
    for relax in LADDER:
        b = build_eds(state, model, scenarios, params, relax)
        sol = solve(b.prog, time_limit=params.time_limit, gap=params.eds_gap,
                    backend=params.backend, iis=False)
        wall += sol.wall_time
        if sol.ok:
            plan = extract_eds(b, model, sol, state.hour)
            plan.relaxations = list(relax)
            plan.wall_time = wall
            if relax:
                log.info("EDS hour %d solved after relaxing %s", state.hour, relax)
            return plan
        tried.append((relax, sol.status))
    raise EdsInfeasible(f"EDS infeasible at hour {state.hour} after {tried}")


def advance(state: EdsState, plan: EdsPlan, realized: dict, params: Params = Params(),
            events: list | None = None) -> EdsState:
    """Shift one hour, seeding storage and fuel from measured values.

    ``realized`` holds ``soc``, ``fuel`` and ``dg_last`` dicts. Seeded SOC is
    clamped into the scheduling band; each clamp is reported in ``events``.
    """
    lo, hi = params.soc_sched
    soc = {}
    for k, v in realized["soc"].items():
        c = float(np.clip(v, lo, hi))
        if c != v and events is not None:
            events.append(("SOC_CLAMP", k, float(v), c))
        soc[k] = c
    fuel = dict(realized["fuel"])
    hist = {n: list(h) + [int(plan.theta[n][0])] for n, h in state.theta_hist.items()}
    return replace(state, hour=state.hour + 1, soc=soc, fuel=fuel,
                   dg_last=dict(realized["dg_last"]), theta_hist=hist)
