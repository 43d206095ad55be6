"""Physical side of the loop: apply a 5-minute dispatch to realized load and
PV, solve the nonlinear power flow, let the grid-forming unit pick up the
mismatch and enforce its rating and state-of-charge limits."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import Params
from .grid import NetworkModel
from .lindist import LineSensitivity, lindistflow_voltages
from .powerflow import SweepResult, sweep_power_flow

log = logging.getLogger(__name__)

DK = 5.0 / 60.0


@dataclass
class SimState:
    soc: dict[str, float]
    fuel: dict[str, float]
    cmg_off: bool = False
    dg_energy: dict[str, float] = field(default_factory=dict)   # kWh this hour

    @classmethod
    def initial(cls, model: NetworkModel) -> "SimState":
        return cls(soc={g.id: g.soc_init for g in model.gens("ES")},
                   fuel={g.id: g.fuel_init for g in model.gens("DG")},
                   dg_energy={g.id: 0.0 for g in model.gens("DG")})


@dataclass
class StepResult:
    served_p: dict[str, np.ndarray]     # kW per phase actually supplied
    demand_p: dict[str, np.ndarray]     # realized demand of every load node
    pv: dict[str, float]
    es: dict[str, float]                # total kW per unit, discharge positive
    dg: dict[str, float]
    gf_p: np.ndarray                    # per phase kW
    gf_q: np.ndarray
    v2: dict[str, np.ndarray]
    audit: float                        # max |V^2 sweep - V^2 linearised|
    residual: float                     # sweep power-balance residual (pu)
    iterations: int
    on: dict[str, np.ndarray] = field(default_factory=dict)   # connection actually applied
    shed: list[str] = field(default_factory=list)
    curtailed: float = 0.0
    events: list[tuple] = field(default_factory=list)


def _sweep(model, nodes, load_p, load_q, inj_p, inj_q, gf, params) -> SweepResult:
    sb = model.base.s_phase
    s_net = {}
    for n in nodes:
        s = (load_p.get(n, 0) - inj_p.get(n, 0)) + 1j * (load_q.get(n, 0) - inj_q.get(n, 0))
        s_net[n] = np.asarray(s, complex) * np.ones(3) / sb
    return sweep_power_flow(model, nodes, s_net, slack_node=gf.node, v_slack=params.v_slack)


def apply_step(model: NetworkModel, sens: LineSensitivity, nodes: list[str],
               on: dict[str, np.ndarray], real_p: dict[str, np.ndarray],
               real_q: dict[str, np.ndarray], pv_avail: dict[str, float], setpoints,
               state: SimState, params: Params = Params(),
               priority: dict[str, float] | None = None) -> StepResult:
    """Advance one 5-minute step in place on ``state``.

    ``on`` holds the connected share (0..1) per load node and phase, ``real_p``
    and ``real_q`` the realized demand including any pickup surge, and
    ``setpoints`` an :class:`~cmgrestore.rt.RtDispatch`. When the grid-forming
    unit runs out of rating or energy, nodes are dropped in ascending
    ``priority`` (omega1 * omega2; node id breaks ties).
    """
    live = set(nodes)
    gf = model.grid_forming
    sb = model.base.s_phase
    events = []
    on = {n: np.array(v, float) for n, v in on.items()}

    inj_p: dict[str, np.ndarray] = {n: np.zeros(3) for n in nodes}
    inj_q: dict[str, np.ndarray] = {n: np.zeros(3) for n in nodes}
    pv_out, es_out, dg_out = {}, {}, {}
    for g in model.generators.values():
        if g.node not in live or g.grid_forming:
            continue
        phs = np.flatnonzero(g.mask)
        if g.is_pv:
            av = pv_avail[g.id] / len(phs)
            if g.kind == "PV-UC":
                p = np.where(g.mask, av, 0.0)
                q = np.zeros(3)
            else:
                sp = setpoints.pv.get(g.id, np.zeros(3))
                p = np.minimum(sp, av) * g.mask
                q = setpoints.pv_q.get(g.id, np.zeros(3)) * g.mask
            pv_out[g.id] = p
        elif g.kind == "ES":
            p = setpoints.es_p.get(g.id, np.zeros(3)).copy()
            q = setpoints.es_q.get(g.id, np.zeros(3))
            # never let a follower step past its operational band
            k = 100.0 * DK / g.e_kwh
            room_dn = max(state.soc[g.id] - g.soc_op_min, 0.0) / k
            room_up = max(g.soc_op_max - state.soc[g.id], 0.0) / k
            tot = p.sum()
            if tot > room_dn + 1e-9 or -tot > room_up + 1e-9:
                p = p * (min(room_dn, tot) if tot > 0 else -min(room_up, -tot)) / tot
            es_out[g.id] = p
        elif g.kind == "DG":
            p = setpoints.dg_p.get(g.id, np.zeros(3))
            q = setpoints.dg_q.get(g.id, np.zeros(3))
            dg_out[g.id] = p
        else:
            continue
        inj_p[g.node] += p
        inj_q[g.node] += q

    demand = {n: np.asarray(real_p[n], float) for n in real_p}
    prio = priority or {n: model.nodes[n].omega1 for n in on}
    order = sorted((n for n in on if n in live), key=lambda n: (prio[n], n))
    shed: list[str] = []
    curtailed = 0.0
    cap = gf.s_kva / gf.n_phases
    k_gf = 100.0 * DK / gf.e_kwh
    while True:
        lp = {n: on[n] * real_p[n] for n in on if n in live}
        lq = {n: on[n] * real_q[n] for n in on if n in live}
        res = _sweep(model, nodes, lp, lq, inj_p, inj_q, gf, params)
        gp, gq = res.slack_s.real * sb, res.slack_s.imag * sb
        over = np.any(np.abs(gp + 1j * gq) > cap * params.tau + 1e-6)
        drain = gp.sum() > 0 and state.soc[gf.id] - k_gf * gp.sum() < gf.soc_op_min
        fill = gp.sum() < 0 and state.soc[gf.id] - k_gf * gp.sum() > gf.soc_op_max
        if (over and gp.sum() >= 0) or drain:
            nxt = next((n for n in order if on[n].any() and n not in shed), None)
            if nxt is None:
                break
            on[nxt] = np.zeros(3)
            shed.append(nxt)
            continue
        if (over and gp.sum() < 0) or fill:
            pvc = [g for g in model.gens("PV-C") if g.id in pv_out and pv_out[g.id].sum() > 1e-9]
            if not pvc:
                break
            for g in pvc:
                curtailed += float(pv_out[g.id].sum())
                inj_p[g.node] -= pv_out[g.id]
                pv_out[g.id] = np.zeros(3)
            continue
        break
    if shed:
        events.append(("SHED", ";".join(shed)))
    if curtailed:
        events.append(("CURTAIL", round(curtailed, 6)))

    # energy bookkeeping
    gf_tot = float(gp.sum())
    state.soc[gf.id] -= k_gf * gf_tot
    if state.soc[gf.id] <= gf.soc_op_min + 1e-9:
        events.append(("SOC_FLOOR", round(state.soc[gf.id], 6)))
        state.soc[gf.id] = max(state.soc[gf.id], 0.0)
    for gid, p in es_out.items():
        g = model.generators[gid]
        state.soc[gid] -= 100.0 * DK * p.sum() / g.e_kwh
    for gid, p in dg_out.items():
        g = model.generators[gid]
        tot = float(p.sum())
        if tot > 1e-9:
            state.fuel[gid] -= (g.alpha * tot + g.beta * g.p_max) * DK
            state.dg_energy[gid] = state.dg_energy.get(gid, 0.0) + tot * DK

    # audit the linearisation against the nonlinear solution
    lp = {n: on[n] * real_p[n] for n in on if n in live}
    lq = {n: on[n] * real_q[n] for n in on if n in live}
    netp = {n: (lp.get(n, 0) - inj_p[n]) * np.ones(3) / sb for n in nodes}
    netq = {n: (lq.get(n, 0) - inj_q[n]) * np.ones(3) / sb for n in nodes}
    netp[gf.node] = netp[gf.node] - gp / sb
    netq[gf.node] = netq[gf.node] - gq / sb
    lin = lindistflow_voltages(model, sens, nodes, netp, netq, params.v_slack)
    audit = 0.0
    v2 = {}
    for n in nodes:
        v2[n] = res.v2(n)
        d = np.abs(v2[n] - lin[n])
        if np.any(np.isfinite(d)):
            audit = max(audit, float(np.nanmax(d)))
    return StepResult(served_p=lp, demand_p=demand,
                      pv={g: float(v.sum()) for g, v in pv_out.items()},
                      es={g: float(v.sum()) for g, v in es_out.items()},
                      dg={g: float(v.sum()) for g, v in dg_out.items()}, gf_p=gp, gf_q=gq, v2=v2,
                      audit=audit, residual=res.residual, iterations=res.iterations, on=on,
                      shed=shed,
                      curtailed=curtailed, events=events)


def off_step(model: NetworkModel, pv_avail: dict[str, float], state: SimState) -> float:
    """Microgrid de-energized: PV at the grid-forming bus recharges its
    storage. Returns the charging power (kW)."""
    gf = model.grid_forming
    room = max(gf.soc_op_max - state.soc[gf.id], 0.0) * gf.e_kwh / (100.0 * DK)
    pv = sum(pv_avail[g.id] for g in model.gens(("PV-C", "PV-UC")) if g.node == gf.node)
    chg = float(min(pv, gf.s_kva, room))
    state.soc[gf.id] += 100.0 * DK * chg / gf.e_kwh
    return chg


def restart_ready(model: NetworkModel, soc: float, pv_next_hour_kwh: float,
                  params: Params = Params()) -> bool:
    """Re-energize once stored plus expected co-located PV energy clears the
    restart threshold."""
    gf = model.grid_forming
    return soc + 100.0 * pv_next_hour_kwh / gf.e_kwh >= params.restart_soc
