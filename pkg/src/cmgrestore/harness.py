"""Closed-loop restoration run: hourly scheduling, 15-minute plan, 5-minute
dispatch and the physical simulator, with every decision written to the
ledger."""
from __future__ import annotations

import csv
import itertools
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import Params, RunConfig, dump_config
from .demand import EquityTracker, MsdSet, clpu_multiplier, update_equity, zone_keys
from .eds import EdsInfeasible, EdsState, advance, solve_eds
from .forecast import ErrorCase, ErrorModel, blend, inject_error, sample_scenarios, synthetic_forecast
from .grid import NetworkModel, energized_closure, fixture_path, load_network
from .ledger import RunLedger
from .lindist import build_sensitivities
from .metrics import compute_metrics, format_report, plot_data, write_metrics
from .nrt import SLOTS, NrtInputs, NrtPlan, solve_nrt
from .powerflow import PowerFlowDiverged
from .recourse import FeHistory, compute_fe_impact, recourse_term
from .rt import RtInputs, solve_rt
from .sim import DK, SimState, apply_step, off_step, restart_ready

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_DIVERGENCE = 0, 2, 3, 4
STEPS = 12          # 5-minute steps per hour
SEED_STEP = 8       # last step of slot 2: the state the next hour's problems start from


@dataclass
class RunResult:
    config: RunConfig
    metrics: dict[str, float]
    ledger: RunLedger
    events: list[tuple] = field(default_factory=list)
    timings: dict[str, list[float]] = field(default_factory=dict)
    digest: str = ""
    wall_time: float = 0.0
    out_dir: Path | None = None
    exit_code: int = EXIT_OK
    error: str = ""


def resolve_feeder(name: str) -> NetworkModel:
    p = Path(name)
    return load_network(p if p.suffix in (".yaml", ".yml") and p.exists() else fixture_path(name))


class _Run:
    def __init__(self, cfg: RunConfig, out: Path | None = None):
        self.cfg = cfg
        self.P: Params = cfg.params
        self.model = resolve_feeder(cfg.feeder)
        self.sens = build_sensitivities(self.model)
        m, P = self.model, self.P
        T = cfg.duration
        # one extra hour so the restart rule can look ahead at the last hour
        self.base = synthetic_forecast(m, cfg.start_hour, T + 1, 5, cfg.load_scale, cfg.pv_scale)
        self.real = inject_error(self.base, ErrorCase(cfg.fe_kind, cfg.fe_magnitude), cfg.seed)
        self.f15 = blend(self.base, self.real, P.blend_nrt).coarsen(15)
        self.f5 = blend(self.base, self.real, P.blend_rt)
        em = ErrorModel(sigma_load=P.scenario_sigma_load, sigma_pv=P.scenario_sigma_pv)
        self.scen = sample_scenarios(self.base.coarsen(60).window(0, T), em, P.n_scenarios,
                                     cfg.seed + 1000)
        self.nidx = {n: i for i, n in enumerate(self.base.node_ids)}
        self.uidx = {u: i for i, u in enumerate(self.base.unit_ids)}
        self.loads = [n.id for n in m.load_nodes()]
        self.gf = m.grid_forming
        self.ledger = RunLedger()
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            self.ledger.stream(out / "ledger.csv")
        meta = {"feeder": m.name, "horizon": T, "reserve_band": P.reserve_band,
                "load_ids": ";".join(self.loads),
                "load_class": ";".join(m.nodes[n].load_class for n in self.loads)}
        meta.update({f"fuel_max[{g.id}]": g.fuel_max for g in m.gens("DG")})
        self.ledger.add_many("META", 0, -1, -1, meta)
        self.cls = np.array([m.nodes[n].load_class for n in self.loads])
        self.events: list[tuple] = []
        self.timings = {"eds": [], "nrt": [], "rt": []}
        self.sim = SimState.initial(m)
        self.eds_state = EdsState.initial(m, T)
        self.tracker = EquityTracker.for_model(m, P.equity_window, P.equity_kappa, P.equity)
        self.msd = MsdSet(P.msd_hours)
        self.fe = FeHistory(P.e_max_frac * self.gf.e_kwh)
        self.keys = zone_keys(m)
        self.hours_off = {n: 0.0 for n in self.loads}
        self.seed_soc = dict(self.sim.soc)
        self.seed_fuel = dict(self.sim.fuel)
        self.dg_last = {g.id: 0.0 for g in m.gens("DG")}
        self.pending: dict = {}

    # ------------------------------------------------------------------
    def event(self, t, h, k, kind, detail=""):
        self.events.append((t, h, k, kind, str(detail)))
        self.ledger.add("EVENT", t, h, k, kind, str(detail) if detail != "" else "1")

    def _record_step(self, t, k, conn, cmg_on, res=None, extra=None):
        """Write the realization row set for one step. ``conn`` maps load node
        to the per-phase connected indicator actually applied."""
        i0 = t * STEPS + k
        h = k // 3
        fc = np.array([self.f5.p[i0, self.nidx[n]].sum() for n in self.loads])
        real = np.array([self.real.p[i0, self.nidx[n]].sum() for n in self.loads])
        srv, rsrv, share = np.zeros(len(self.loads)), np.zeros(len(self.loads)), []
        phase = np.zeros(3)
        for j, n in enumerate(self.loads):
            c = conn.get(n, np.zeros(3))
            f, r = self.f5.p[i0, self.nidx[n]], self.real.p[i0, self.nidx[n]]
            srv[j], rsrv[j] = float(c @ f), float(c @ r)
            phase += c * r
            live = self.model.nodes[n].mask & (self.model.nodes[n].p_kw > 0)
            share.append(float(c[live].mean()) if live.any() else 0.0)
        cl, ncl = self.cls == "CL", self.cls == "NCL"
        pv_av = sum(self.real.pv[i0, j] for j in self.uidx.values())
        row = {"soc_gf": self.sim.soc[self.gf.id], "cmg_on": int(cmg_on),
               "fc_cl": fc[cl].sum(), "fc_ncl": fc[ncl].sum(),
               "srv_cl": srv[cl].sum(), "srv_ncl": srv[ncl].sum(),
               "real_cl": real[cl].sum(), "real_ncl": real[ncl].sum(),
               "rsrv_cl": rsrv[cl].sum(), "rsrv_ncl": rsrv[ncl].sum(),
               "on": share, "phase": phase,
               "pv_used": sum(res.pv.values()) if res is not None else 0.0, "pv_avail": pv_av}
        if res is not None:
            vm = np.sqrt(np.concatenate([v[np.isfinite(v)] for v in res.v2.values()]))
            row.update({"gf_p": res.gf_p, "gf_q": res.gf_q, "vmin": vm.min(), "vmax": vm.max(),
                        "audit": res.audit, "residual": res.residual,
                        "iterations": res.iterations})
        for g in sorted(self.sim.soc):
            if g != self.gf.id:
                row[f"soc[{g}]"] = self.sim.soc[g]
        for g in sorted(self.sim.fuel):
            row[f"fuel[{g}]"] = self.sim.fuel[g]
        row.update(extra or {})
        self.ledger.add_many("SIM", t, h, k, row)
        return share

    def _pv_avail(self, prof, i0):
        return {u: float(prof.pv[i0, j]) for u, j in self.uidx.items()}

    # ------------------------------------------------------------------
    def off_hour(self, t, k0=0):
        for k in range(k0, STEPS):
            i0 = t * STEPS + k
            chg = off_step(self.model, self._pv_avail(self.real, i0), self.sim)
            self._record_step(t, k, {}, False, extra={"off_charge": chg})

    def hour(self, t: int):
        m, P, gf = self.model, self.P, self.gf
        self._post(t)
        if self.sim.cmg_off:
            i0 = t * STEPS
            pv_kwh = sum(min(self.base.pv[i0:i0 + STEPS, self.uidx[g.id]].sum() * DK, g.s_kva)
                         for g in m.gens(("PV-C", "PV-UC")) if g.node == gf.node)
            if t > 0 and restart_ready(m, self.sim.soc[gf.id], pv_kwh, P):
                self.sim.cmg_off = False
                self.event(t, -1, -1, "RESTART", round(self.sim.soc[gf.id], 6))
            else:
                self._advance_off(t)
                self.off_hour(t)
                self._close_hour(t, None, {})
                return
        # hourly scheduling over the remaining horizon
        self.eds_state = replace(self.eds_state, hour=t)
        try:
            plan = solve_eds(self.eds_state, m, self.scen.window(t, self.cfg.duration - t), P)
        except EdsInfeasible as exc:
            self.event(t, -1, -1, "CMG_OFF", f"EDS: {exc}")
            self.sim.cmg_off = True
            self._advance_off(t)
            self.off_hour(t)
            self._close_hour(t, None, {})
            return
        self.timings["eds"].append(plan.wall_time)
        ngs = sorted(plan.theta)
        self.ledger.add_many("EDS", t, -1, -1, {
            "status": plan.status, "theta": [plan.theta[n][0] for n in ngs],
            "load_exp": plan.expected_total(0),
            "relax": "+".join(plan.relaxations) or "none",
            "balance_residual": plan.balance_residual, "objective": plan.objective,
            "wall_time": plan.wall_time})
        self.ledger.add("EDS", t, -1, -1, "soc_end_gf", plan.soc[gf.id][0])
        for gid in sorted(plan.soc):
            self.ledger.add("EDS", t, -1, -1, f"soc_end[{gid}]", plan.soc[gid][0])
        for gid in sorted(plan.dg_p):
            self.ledger.add("EDS", t, -1, -1, f"dg[{gid}]", plan.dg_p[gid][0])
        theta_t = {n: int(plan.theta[n][0]) for n in ngs}
        nodes = m.ng_nodes(energized_closure(m.groups, theta_t))

        # recourse and demand-side terms
        rec = recourse_term(self.fe, P.recourse_n, zero_intercept=P.zero_intercept) \
            if P.recourse else None
        if rec is not None:
            self.ledger.add_many("RECOURSE", t, -1, -1, rec.as_dict())
        mult = {n: clpu_multiplier(self.hours_off[n], P.clpu_k, P.clpu_lambda)
                if self.hours_off[n] > 0 else 1.0 for n in self.loads}
        f15 = self.f15.window(SLOTS * t, SLOTS)
        clpu = {}
        for n in self.loads:
            if mult[n] > 1.0:
                i = self.nidx[n]
                clpu[n] = ((mult[n] - 1) * f15.p[:, i].mean(axis=0),
                           (mult[n] - 1) * f15.q[:, i].mean(axis=0))
        om2 = self.tracker.omega2() if P.equity else {}
        inp = NrtInputs(hour=t, nodes=nodes, forecast=f15, soc0=dict(self.seed_soc),
                        fuel0=dict(self.seed_fuel), dg_last=dict(self.dg_last),
                        eds_load={i: float(v[0]) for i, v in plan.load.items()},
                        eds_dg={g: float(v[0]) for g, v in plan.dg_p.items()},
                        eds_soc_end={g: float(v[0]) for g, v in plan.soc.items()},
                        recourse=rec, pinned=self.msd.pinned, omega2=om2, clpu=clpu)
        nrt = solve_nrt(m, self.sens, inp, P)
        self.timings["nrt"].append(nrt.wall_time)
        self.ledger.add_many("NRT", t, -1, -1, {
            "status": nrt.status, "relax": "+".join(nrt.relaxations) or "none",
            "objective": nrt.objective, "wall_time": nrt.wall_time,
            "cut_cap": np.nan if nrt.cut_cap is None else nrt.cut_cap})
        for key in self.keys:
            if key in nrt.x:
                self.ledger.add("NRT", t, -1, -1, f"x[{key[0]},{key[1]}]", nrt.x[key])
        for gid in sorted(nrt.dg_p):
            self.ledger.add("NRT", t, -1, -1, f"dg[{gid}]", nrt.dg_p[gid])
        for gid in nrt.dg_off:
            self.event(t, -1, -1, "DG_OUT_OF_FUEL", gid)
        if nrt.cmg_off:
            self.event(t, -1, -1, "CMG_OFF", "NRT infeasible")
            self._advance(t, plan)
            self.off_hour(t)
            self._close_hour(t, None, {})
            return

        prio = {n: m.nodes[n].omega1 * om2.get(n, 1.0) for n in self.loads}
        share_sum = {n: 0.0 for n in self.loads}
        snapshot = None
        for k in range(STEPS):
            h = k // 3
            if k % 3 == 0:
                vals = {"served": sum(v[h].sum() for v in nrt.served.values()),
                        "delta_d": nrt.delta_d[h]}
                vals["soc_gf"] = nrt.soc[gf.id][h + 1]
                for gid in sorted(nrt.soc):
                    vals[f"soc[{gid}]"] = nrt.soc[gid][h + 1]
                if nrt.cut_slack is not None:
                    vals["cut_slack"] = nrt.cut_slack[h]
                self.ledger.add_many("NRT", t, h, -1, vals)
            i0 = t * STEPS + k
            lp = {n: self.f5.p[i0, self.nidx[n]] for n in nodes}
            lq = {n: self.f5.q[i0, self.nidx[n]] for n in nodes}
            cl5 = {n: ((mult[n] - 1) * lp[n], (mult[n] - 1) * lq[n]) for n in clpu if n in lp}
            rin = RtInputs(t, h, k, nrt, lp, lq, self._pv_avail(self.f5, i0), dict(self.sim.soc),
                           cl5)
            d = solve_rt(m, self.sens, rin, P)
            self.timings["rt"].append(d.wall_time)
            self.ledger.add_many("RT", t, h, k, {
                "status": d.status, "relax": "+".join(d.relaxations) or "none",
                "pv": sum(v.sum() for v in d.pv.values()), "wall_time": d.wall_time})
            if d.cmg_off:
                self.event(t, h, k, "CMG_OFF", "RT infeasible")
                self.sim.cmg_off = True
                self.off_hour(t, k)
                break
            on = {}
            for n in nodes:
                nd = m.nodes[n]
                if not nd.has_load:
                    continue
                x = np.array([nrt.x.get((nd.dr_zone, ph), 0) for ph in range(3)], float)
                on[n] = x * d.served.get(n, np.ones(3))
            real_p = {n: mult[n] * self.real.p[i0, self.nidx[n]] for n in on}
            real_q = {n: mult[n] * self.real.q[i0, self.nidx[n]] for n in on}
            res = apply_step(m, self.sens, nodes, on, real_p, real_q,
                             self._pv_avail(self.real, i0), d, self.sim, P, prio)
            share = self._record_step(t, k, res.on, True, res)
            for j, n in enumerate(self.loads):
                share_sum[n] += share[j]
            for ev in res.events:
                self.event(t, h, k, ev[0], ev[1])
            if any(ev[0] == "SOC_FLOOR" for ev in res.events):
                self.event(t, h, k, "CMG_OFF", "grid-forming storage at its floor")
                self.sim.cmg_off = True
                self.off_hour(t, k + 1)
                break
            if k == SEED_STEP:
                snapshot = (dict(self.sim.soc), dict(self.sim.fuel))
        self._advance(t, plan, nrt, snapshot)
        self._close_hour(t, nrt, {n: s / STEPS for n, s in share_sum.items()})

    # ------------------------------------------------------------------
    def _advance(self, t, plan, nrt: NrtPlan | None = None, snapshot=None):
        """Seed the next hour's problems and record the forecast-error impact."""
        m = self.model
        if nrt is not None and snapshot is not None:
            soc, fuel = snapshot
            seed_soc = {g: soc[g] + (nrt.soc[g][SLOTS] - nrt.soc[g][SLOTS - 1]) if g in nrt.soc
                        else self.sim.soc[g] for g in soc}
            seed_fuel = {}
            for g in fuel:
                gen = m.generators[g]
                use = (gen.alpha * nrt.dg_p[g].sum() + gen.beta * gen.p_max) * 0.25 \
                    if g in nrt.dg_p and nrt.dg_p[g].sum() > 1e-9 else 0.0
                seed_fuel[g] = fuel[g] - use
            gid = self.gf.id
            fe = compute_fe_impact(float(np.clip(nrt.soc[gid][SLOTS], 0, 100)),
                                   float(np.clip(seed_soc[gid], 0, 100)), self.gf.e_kwh)
            self.fe.append(fe)
            self.pending["fe_kwh"] = fe
            self.dg_last = {g: float(v.sum()) for g, v in nrt.dg_p.items()}
            self.dg_last.update({g: 0.0 for g in nrt.dg_off})
        else:
            seed_soc, seed_fuel = dict(self.sim.soc), dict(self.sim.fuel)
            self.dg_last = {g.id: 0.0 for g in m.gens("DG")}
        self.seed_soc = {g: float(np.clip(v, 0.0, 100.0)) for g, v in seed_soc.items()}
        self.seed_fuel = seed_fuel
        ev = []
        self.eds_state = advance(self.eds_state, plan,
                                 {"soc": self.seed_soc, "fuel": self.seed_fuel,
                                  "dg_last": self.dg_last}, self.P, ev)
        for e in ev:
            self.pending.setdefault("clamps", []).append(e)

    def _advance_off(self, t):
        st = self.eds_state
        hist = {n: list(h) + [0] for n, h in st.theta_hist.items()}
        lo, hi = self.P.soc_sched
        self.seed_soc = dict(self.sim.soc)
        self.seed_fuel = dict(self.sim.fuel)
        self.dg_last = {g.id: 0.0 for g in self.model.gens("DG")}
        self.eds_state = replace(st, hour=t + 1,
                                 soc={g: float(np.clip(v, lo, hi)) for g, v in self.sim.soc.items()},
                                 fuel=dict(self.sim.fuel), dg_last=dict(self.dg_last),
                                 theta_hist=hist)

    def _close_hour(self, t, nrt: NrtPlan | None, share: dict[str, float]):
        gf = self.gf
        update_equity(self.tracker, share)
        conn = {key: (nrt.x.get(key, 0) if nrt is not None and not self.sim.cmg_off else 0)
                for key in self.keys}
        self.msd.update(conn)
        for n in self.loads:
            self.hours_off[n] = 0.0 if share.get(n, 0.0) > 0 else self.hours_off[n] + 1.0
        if not self.sim.cmg_off and self.sim.soc[gf.id] < self.P.shutdown_soc:
            self.pending["cmg_off"] = round(self.sim.soc[gf.id], 6)
            self.sim.cmg_off = True

    def _post(self, t):
        """Rows describing the end of the previous hour (keyed at its successor)."""
        if "fe_kwh" in self.pending:
            self.ledger.add("POST", t, -1, -1, "fe_kwh", self.pending["fe_kwh"])
        for e in self.pending.get("clamps", []):
            self.event(t, -1, -1, e[0], f"{e[1]}:{e[2]:.6g}->{e[3]:.6g}")
        if "cmg_off" in self.pending:
            self.event(t, -1, -1, "CMG_OFF", f"grid-forming SOC {self.pending['cmg_off']}")
        self.ledger.add("POST", t, -1, -1, "soc_gf", self.sim.soc[self.gf.id])
        self.pending = {}


def run_case(cfg: RunConfig, out_dir: str | Path | None = None) -> RunResult:
    """Run one configuration end to end. Failures are reported through
    ``exit_code``; whatever was logged before the failure is kept."""
    t0 = time.perf_counter()
    target = out_dir or cfg.out_dir
    out = Path(target) if target else None
    run = None
    code, err = EXIT_OK, ""
    try:
        run = _Run(cfg, out)
        for t in range(cfg.duration):
            run.hour(t)
        run._post(cfg.duration)
    except PowerFlowDiverged as exc:
        code, err = EXIT_DIVERGENCE, str(exc)
    except (ValueError, KeyError) as exc:
        if run is not None:
            raise
        code, err = EXIT_VALIDATION, str(exc)
    except RuntimeError as exc:
        code, err = EXIT_SOLVER, str(exc)
    if run is None:
        ledger, events, timings = RunLedger(), [], {}
    else:
        ledger, events, timings = run.ledger, run.events, run.timings
        if code != EXIT_OK:
            t, h, k = ledger.last_key
            run.event(t, h, k, "CRASH", f"exit {code}: {err}")
        ledger.close()
    metrics = compute_metrics(ledger, cfg.params.reserve_band, cfg.params.supply_basis)
    res = RunResult(cfg, metrics, ledger, events, timings, ledger.digest(),
                    time.perf_counter() - t0, out, code, err)
    if err:
        log.error("run stopped (exit %d): %s", code, err)
    if out is not None:
        write_outputs(res, out)
    return res


def write_outputs(res: RunResult, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(res.config, out / "config.yaml")
    if res.ledger.path != out / "ledger.csv":
        res.ledger.write(out / "ledger.csv")
    with open(out / "events.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "h", "k", "kind", "detail"])
        w.writerows(res.events)
    if res.metrics:
        write_metrics(res.metrics, out / "metrics.csv")
        (out / "metrics.txt").write_text(format_report(res.metrics))
        plot_data(res.ledger, out)
    with open(out / "timings.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "count", "mean_s", "max_s"])
        for k, v in res.timings.items():
            if v:
                w.writerow([k, len(v), f"{np.mean(v):.6g}", f"{np.max(v):.6g}"])
    (out / "digest.txt").write_text(res.digest + "\n")


def _run_one(args):
    cfg, out = args
    try:
        r = run_case(cfg, out)
    except Exception as exc:  # one bad point must not stop a sweep
        log.error("sweep point failed: %s", exc)
        return {}, "", EXIT_SOLVER
    return r.metrics, r.digest, r.exit_code


def grid_cases(grid: dict[str, list]) -> list[dict]:
    """Cartesian product of override values, first key varying slowest."""
    names = list(grid)
    return [dict(zip(names, vals)) for vals in itertools.product(*(grid[n] for n in names))]


def sweep(base: RunConfig, cases: list[dict], out_dir: str | Path | None = None,
          workers: int = 1) -> list[tuple[dict, dict[str, float], str, int]]:
    """Run ``base`` under each override dict. Returns (overrides, metrics,
    digest, exit code) per case in order; also writes ``sweep.csv``."""
    jobs = []
    for i, ov in enumerate(cases):
        out = Path(out_dir) / f"case{i:03d}" if out_dir else None
        jobs.append((base.with_overrides(**ov), out))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            done = list(ex.map(_run_one, jobs))
    else:
        done = [_run_one(j) for j in jobs]
    rows = [(ov, m, d, c) for ov, (m, d, c) in zip(cases, done)]
    if out_dir:
        names = sorted({k for ov in cases for k in ov})
        keys = sorted({k for _, m, _, _ in rows for k in m})
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(out_dir) / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case"] + names + keys + ["digest", "exit_code"])
            for i, (ov, m, d, c) in enumerate(rows):
                w.writerow([i] + [ov.get(n, "") for n in names]
                           + [f"{m[k]:.10g}" if k in m else "" for k in keys] + [d, c])
    return rows
