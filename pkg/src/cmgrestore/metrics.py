"""Run-level performance measures, computed from the ledger alone so a saved
run (or a truncated one) can be re-scored without re-running it."""
from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .ledger import RunLedger, parse_value

DK = 5.0 / 60.0
STEPS = 12

# +1: larger is better, -1: smaller is better, 0: no preferred direction
DIRECTION = {
    "P_NCL_pct": 1, "P_CL_pct": 1, "P_total_pct": 1,
    "T_ASD_NCL_h": 1, "T_ASD_NCL_std_h": -1, "T_ASD_CL_h": 1, "T_ASD_CL_std_h": -1,
    "T_AID_NCL_h": -1, "T_AID_CL_h": -1, "P_PV_total_pct": 1, "F_DG_balance_pct": 0,
    "SOC_ES_balance_pct": 0, "T_RL_ES_pct": -1, "P_Imb_pct": -1, "T_CMG_OFF_h": -1,
    "recourse_slope_mean": 0, "recourse_slope_std": 0,
}


class HorizonMismatch(ValueError):
    pass


def _pct(num: float, den: float) -> float:
    return float(100.0 * num / den) if den > 0 else 100.0


def step_table(ledger: RunLedger) -> tuple[dict, dict[str, np.ndarray]]:
    """Meta rows and per-step SIM columns (only steps whose row set is complete)."""
    meta = {r[4]: r[5] for r in ledger.rows if r[0] == "META"}
    cols: dict[str, dict] = defaultdict(dict)
    for s, t, h, k, name, val in ledger.rows:
        if s == "SIM":
            cols[name][t * STEPS + k] = val
    need = ("soc_gf", "cmg_on", "fc_cl", "fc_ncl", "srv_cl", "srv_ncl", "on", "phase",
            "pv_used", "pv_avail")
    keys = sorted(set.intersection(*(set(cols[n]) for n in need))) if all(n in cols for n in need) \
        else []
    out = {"step": np.asarray(keys, int)}
    for n, d in cols.items():
        vals = [parse_value(d[i]) for i in keys if i in d]
        if len(vals) == len(keys) and vals:
            w = max(v.size for v in vals)
            out[n] = np.array([v if v.size == w else np.full(w, np.nan) for v in vals])
            if w == 1:
                out[n] = out[n][:, 0]
    return meta, out


def compute_metrics(ledger: RunLedger, reserve_band: float | None = None,
                    supply_basis: str = "forecast", strict: bool = False) -> dict[str, float]:
    """Score a run.

    ``supply_basis="forecast"`` divides served forecast load by total forecast
    load; ``"realized"`` uses realized served and realized demand instead.
    With ``strict`` the ledger must cover the declared horizon exactly.
    """
    meta, a = step_table(ledger)
    n = a["step"].size
    horizon = int(float(meta.get("horizon", "0") or 0))
    if strict and n != horizon * STEPS:
        raise HorizonMismatch(f"{n} realization steps for a {horizon} h horizon")
    if n == 0:
        return {}
    if np.any(np.diff(a["step"]) != 1) or a["step"][0] != 0:
        raise HorizonMismatch("realization steps are not contiguous from the start")
    band = float(meta.get("reserve_band", 25.0)) if reserve_band is None else reserve_band
    classes = np.array(meta.get("load_class", "").split(";"))
    cl, ncl = classes == "CL", classes == "NCL"
    if supply_basis == "forecast":
        s_cl, s_ncl, d_cl, d_ncl = a["srv_cl"], a["srv_ncl"], a["fc_cl"], a["fc_ncl"]
    elif supply_basis == "realized":
        s_cl, s_ncl, d_cl, d_ncl = a["rsrv_cl"], a["rsrv_ncl"], a["real_cl"], a["real_ncl"]
    else:
        raise ValueError(f"unknown supply basis {supply_basis!r}")
    hours = n * DK
    on = np.atleast_2d(a["on"]).reshape(n, -1)
    node_h = on.sum(axis=0) * DK
    ph = a["phase"].reshape(n, 3)
    mean = ph.mean(axis=1)
    ok = mean > 1e-9
    imb = np.abs(ph[ok] - mean[ok, None]).max(axis=1) / mean[ok] * 100.0 if ok.any() else [0.0]
    fuel_end = [float(v) for k, v in meta.items() if k.startswith("fuel_max[")]
    fuel_now = {r[4]: float(r[5]) for r in ledger.rows if r[0] == "SIM" and r[4].startswith("fuel[")}
    slopes = np.array([float(r[5]) for r in ledger.rows if r[0] == "RECOURSE" and r[4] == "a"])
    out = {
        "P_NCL_pct": _pct(s_ncl.sum(), d_ncl.sum()),
        "P_CL_pct": _pct(s_cl.sum(), d_cl.sum()),
        "P_total_pct": _pct(s_cl.sum() + s_ncl.sum(), d_cl.sum() + d_ncl.sum()),
        "T_ASD_NCL_h": float(node_h[ncl].mean()) if ncl.any() else 0.0,
        "T_ASD_NCL_std_h": float(node_h[ncl].std()) if ncl.any() else 0.0,
        "T_ASD_CL_h": float(node_h[cl].mean()) if cl.any() else 0.0,
        "T_ASD_CL_std_h": float(node_h[cl].std()) if cl.any() else 0.0,
        "T_AID_NCL_h": float(hours - node_h[ncl].mean()) if ncl.any() else 0.0,
        "T_AID_CL_h": float(hours - node_h[cl].mean()) if cl.any() else 0.0,
        "P_PV_total_pct": _pct(a["pv_used"].sum(), a["pv_avail"].sum()),
        "F_DG_balance_pct": _pct(sum(fuel_now.values()), sum(fuel_end)) if fuel_end else 0.0,
        "SOC_ES_balance_pct": float(a["soc_gf"][-1]),
        "T_RL_ES_pct": float(100.0 * np.mean(a["soc_gf"] < band)),
        "P_Imb_pct": float(np.max(imb)),
        "T_CMG_OFF_h": float((a["cmg_on"] < 0.5).sum() * DK),
        "recourse_slope_mean": float(slopes.mean()) if slopes.size else 0.0,
        "recourse_slope_std": float(slopes.std()) if slopes.size else 0.0,
        "hours": float(hours),
    }
    if "audit" in a:
        out["audit_max"] = float(np.nanmax(a["audit"]))
    if "residual" in a:
        out["residual_max"] = float(np.nanmax(a["residual"]))
    if "vmin" in a and np.isfinite(a["vmin"]).any():
        out["v_min"] = float(np.nanmin(a["vmin"]))
        out["v_max"] = float(np.nanmax(a["vmax"]))
    out["soc_gf_min"] = float(a["soc_gf"].min())
    return out


def compare_runs(a: dict[str, float], b: dict[str, float]) -> dict[str, tuple[float, str]]:
    """``b - a`` per shared metric with a flag saying whether b is better."""
    out = {}
    for k in a:
        if k not in b:
            continue
        d = b[k] - a[k]
        sgn = DIRECTION.get(k, 0)
        flag = "n/a" if sgn == 0 else ("same" if d == 0 else
                                       ("better" if d * sgn > 0 else "worse"))
        out[k] = (d, flag)
    return out


def write_metrics(metrics: dict[str, float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in metrics.items():
            w.writerow([k, f"{v:.10g}"])


def read_metrics(path: str | Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        return {k: float(v) for k, v in rd}


def format_report(metrics: dict[str, float]) -> str:
    """Flat ``key = value`` text."""
    return "\n".join(f"{k} = {v:.6g}" for k, v in metrics.items()) + "\n"


def plot_data(ledger: RunLedger, out_dir: str | Path) -> None:
    """Columnar files behind the load-allocation and SOC-reference plots."""
    out = Path(out_dir)
    hourly: dict[int, dict] = defaultdict(dict)
    for s, t, h, k, name, val in ledger.rows:
        if s == "EDS" and name in ("load_exp", "soc_end_gf"):
            hourly[t][f"eds_{name}"] = val
    meta, a = step_table(ledger)
    nrt_load: dict[tuple, str] = {}
    nrt_soc: dict[tuple, str] = {}
    for s, t, h, k, name, val in ledger.rows:
        if s == "NRT" and h >= 0 and name == "served":
            nrt_load[t, h] = val
        if s == "NRT" and h >= 0 and name == "soc_gf":
            nrt_soc[t, h] = val
    with open(out / "plot_load.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "eds_alloc_kw", "nrt_alloc_kw", "rt_forecast_served_kw",
                    "realized_served_kw"])
        for i, st in enumerate(a["step"]):
            t, k = divmod(int(st), STEPS)
            w.writerow([f"{st * DK:.6g}", hourly[t].get("eds_load_exp", ""),
                        nrt_load.get((t, k // 3), ""),
                        f"{a['srv_cl'][i] + a['srv_ncl'][i]:.10g}",
                        f"{a['rsrv_cl'][i] + a['rsrv_ncl'][i]:.10g}" if "rsrv_cl" in a else ""])
    with open(out / "plot_soc.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "soc_gf", "eds_ref", "nrt_ref", "cmg_on"])
        for i, st in enumerate(a["step"]):
            t, k = divmod(int(st), STEPS)
            w.writerow([f"{st * DK:.6g}", f"{a['soc_gf'][i]:.10g}",
                        hourly[t].get("eds_soc_end_gf", ""), nrt_soc.get((t, k // 3), ""),
                        int(a["cmg_on"][i])])
