"""Command line entry point: ``cmgrestore {run,sweep,verify-theorems,metrics,validate}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import RunConfig, load_config
from .grid import FeederError
from .harness import EXIT_OK, EXIT_VALIDATION, grid_cases, resolve_feeder, run_case, sweep
from .ledger import RunLedger
from .metrics import compare_runs, compute_metrics, format_report
from .theorems import GAMMA_GRID, verify_theorems

# sweep axes named after the experiments, mapped onto config keys
AXES = {
    "fe_bias": lambda v: {"fe_kind": "FE1", "fe_magnitude": float(v)},
    "fe_mape": lambda v: {"fe_kind": "FE2", "fe_magnitude": float(v)},
    "start_hour": lambda v: {"start_hour": int(v)},
    "duration": lambda v: {"duration": int(v)},
    "pv_scale": lambda v: {"pv_scale": float(v)},
    "n_recourse": lambda v: {"recourse_n": int(v)},
    "recourse": lambda v: {"recourse": yaml.safe_load(v)},
    "seed": lambda v: {"seed": int(v)},
}


def _overrides(pairs: list[str]) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise ValueError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    ov = _overrides(args.set)
    for key in ("feeder", "duration", "seed", "start_hour"):
        val = getattr(args, key, None)
        if val is not None:
            ov[key] = val
    if getattr(args, "no_recourse", False):
        ov["recourse"] = False
    return cfg.with_overrides(**ov) if ov else cfg


def cmd_run(args) -> int:
    cfg = _config(args)
    res = run_case(cfg, args.out)
    sys.stdout.write(format_report(res.metrics) if res.metrics else "no realization rows\n")
    print(f"digest = {res.digest}")
    if res.out_dir:
        print(f"outputs in {res.out_dir}")
    if res.exit_code != EXIT_OK:
        print(f"error: {res.error}", file=sys.stderr)
    return res.exit_code


def cmd_sweep(args) -> int:
    base = _config(args)
    grid = {}
    for ax in args.axis:
        name, _, vals = ax.partition("=")
        if name not in AXES or not vals:
            raise ValueError(f"bad axis {ax!r}; known axes: {sorted(AXES)}")
        grid[name] = vals.split(",")
    cases = []
    for combo in grid_cases(grid):
        ov = {}
        for n, v in combo.items():
            ov.update(AXES[n](v))
        cases.append(ov)
    results = sweep(base, cases, args.out, args.workers)
    worst = EXIT_OK
    for ov, m, _, code in results:
        tag = " ".join(f"{k}={v}" for k, v in ov.items())
        worst = max(worst, code)
        print(f"{tag}: T_RL_ES={m.get('T_RL_ES_pct', float('nan')):.2f}% "
              f"P_NCL={m.get('P_NCL_pct', float('nan')):.2f}% "
              f"T_CMG_OFF={m.get('T_CMG_OFF_h', float('nan')):.2f}h exit={code}")
    return worst


def cmd_verify(args) -> int:
    rep = verify_theorems(args.horizon, args.total, args.demand, tuple(args.gamma))
    print("\n".join(rep.lines()))
    return EXIT_OK if rep.ok else 1


def cmd_metrics(args) -> int:
    led = RunLedger.read(Path(args.dir) / "ledger.csv")
    m = compute_metrics(led, supply_basis=args.basis)
    sys.stdout.write(format_report(m))
    if args.compare:
        other = compute_metrics(RunLedger.read(Path(args.compare) / "ledger.csv"),
                                supply_basis=args.basis)
        print("# delta (compare - dir)")
        for k, (d, flag) in compare_runs(m, other).items():
            print(f"{k} = {d:+.6g} ({flag})")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        m = resolve_feeder(args.feeder)
    except (FeederError, FileNotFoundError, ValueError) as exc:
        print(f"invalid feeder: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    gens = ", ".join(f"{g.id}({g.kind})" for g in m.generators.values())
    print(f"{m.name}: {len(m.nodes)} nodes, {len(m.edges)} edges, {len(m.groups)} node groups")
    print(f"generators: {gens}")
    print(f"grid-forming: {m.grid_forming.id} at {m.grid_forming.node}")
    print(f"peak load: {m.peak_load():.1f} kW")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cmgrestore", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--set", nargs="*", default=[], metavar="KEY=VALUE",
                       help="override any configuration or parameter key")
        p.add_argument("--feeder")
        p.add_argument("--duration", type=int)
        p.add_argument("--start-hour", dest="start_hour", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--no-recourse", action="store_true")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("run", help="run one restoration case")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("sweep", help="run a grid of cases")
    common(p)
    p.add_argument("--axis", action="append", required=True,
                   help=f"name=v1,v2,... with name in {sorted(AXES)}")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("verify-theorems", help="single-bus exhaustion checks")
    p.add_argument("--horizon", type=int, default=48)
    p.add_argument("--total", type=float, default=2400.0)
    p.add_argument("--demand", type=float, default=100.0)
    p.add_argument("--gamma", type=float, nargs="*", default=list(GAMMA_GRID))
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("metrics", help="score a saved run directory")
    p.add_argument("dir")
    p.add_argument("--compare", help="second run directory to diff against")
    p.add_argument("--basis", choices=("forecast", "realized"), default="forecast")
    p.set_defaults(func=cmd_metrics)
    p = sub.add_parser("validate", help="check a feeder description")
    p.add_argument("feeder")
    p.set_defaults(func=cmd_validate)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
