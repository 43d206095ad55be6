"""Run parameters. Defaults follow the base case of the restoration study;
values the study leaves open are marked."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml


@dataclass(frozen=True)
class Params:
    # scheduling
    gamma: float = 1.2               # reserve factor on ES/DG bounds
    soc_sched: tuple = (20.0, 80.0)  # scheduling SOC band, %
    msd_hours: int = 2
    n_scenarios: int = 20
    eta: dict = field(default_factory=lambda: {"CL": 0.50, "NCL": 0.75})
    eps: dict = field(default_factory=lambda: {"CL": 0.20, "NCL": 0.05})
    chance_mode: str = "per_ng"      # per_ng | summed
    cl_min_frac: float = 0.5         # CL must-supply share of forecast (open)
    tau: float = 1.1
    scenario_sigma_load: float = 0.08
    scenario_sigma_pv: float = 0.15
    eds_tiebreak: float = 1e-4       # reward per kWh kept in storage/fuel tanks
    # near real time
    v_min: float = 0.95
    v_max: float = 1.05
    v_slack: float = 1.04
    knots: int = 17
    w_load: float = 1.0              # relative weights of the NRT objective terms (open)
    w_imbalance: float = 1.0
    w_dg: float = 1.0
    w_soc: float = 1.0
    dg_imbalance_frac: float = 0.10  # per-phase DG imbalance bound (open)
    clpu_k: float = 0.5
    clpu_lambda: float = 0.3
    equity: bool = True
    equity_kappa: float = 0.5
    equity_window: int = 24
    mu_factor: float = 10.0
    # recourse
    recourse: bool = True
    recourse_n: int = 10
    e_max_frac: float = 0.10
    zero_intercept: bool = False
    # forecasts seen by the later stages
    blend_nrt: float = 0.5
    blend_rt: float = 0.8
    # simulator policy
    shutdown_soc: float = 20.0
    restart_soc: float = 22.0
    reserve_band: float = 25.0       # T^RL,ES threshold on the grid-forming SOC
    supply_basis: str = "forecast"   # forecast | realized denominators for supply metrics
    # solver
    backend: str = "highs"
    time_limit: float = 60.0
    gap: float = 1e-4
    eds_gap: float = 1e-3            # EDS is large and degenerate; see notes

    def with_overrides(self, **kw) -> "Params":
        names = {f.name for f in fields(self)}
        bad = set(kw) - names
        if bad:
            raise KeyError(f"unknown parameter(s): {sorted(bad)}")
        return replace(self, **kw)


@dataclass(frozen=True)
class RunConfig:
    feeder: str = "desk13"
    start_hour: int = 0
    duration: int = 48
    fe_kind: str = "none"            # none | FE1 | FE2
    fe_magnitude: float = 0.0
    seed: int = 0
    load_scale: float = 1.0
    pv_scale: float = 1.0
    out_dir: str | None = None
    params: Params = field(default_factory=Params)

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("duration must be at least 1 hour")
        if self.params.recourse and self.params.recourse_n < 2:
            raise ValueError("recourse needs n >= 2")
        if not 0 <= self.start_hour < 24:
            raise ValueError("start hour must lie in [0, 24)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"]["soc_sched"] = list(self.params.soc_sched)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        p = dict(d.pop("params", {}) or {})
        if "soc_sched" in p:
            p["soc_sched"] = tuple(p["soc_sched"])
        known = {f.name for f in fields(cls)}
        extra = {k: d.pop(k) for k in list(d) if k not in known}
        p.update(extra)  # flat parameter keys are accepted at top level too
        return cls(params=Params().with_overrides(**p), **d)

    def with_overrides(self, **kw) -> "RunConfig":
        top = {f.name for f in fields(self)} - {"params"}
        mine = {k: v for k, v in kw.items() if k in top}
        rest = {k: v for k, v in kw.items() if k not in top}
        return replace(self, params=self.params.with_overrides(**rest), **mine)


def load_config(path: str | Path) -> RunConfig:
    with open(path) as fh:
        data: Any = yaml.safe_load(fh) or {}
    return RunConfig.from_dict(data)


def dump_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
