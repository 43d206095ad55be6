import csv

import pytest

from cmgrestore.cli import main
from cmgrestore.config import RunConfig, dump_config, load_config
from cmgrestore.harness import EXIT_OK, EXIT_VALIDATION, grid_cases, run_case, sweep
from cmgrestore.ledger import RunLedger
from cmgrestore.metrics import compute_metrics

SHORT = RunConfig(feeder="two_node", duration=3, start_hour=10).with_overrides(recourse=False)


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("short")
    return run_case(SHORT, out), out


def test_stage_cadence(short_run):
    r, _ = short_run
    assert r.exit_code == EXIT_OK
    per = {s: len({(row[1], row[3]) for row in r.ledger.rows if row[0] == s})
           for s in ("EDS", "NRT", "RT", "SIM")}
    assert per == {"EDS": 3, "NRT": 3, "RT": 36, "SIM": 36}
    assert r.metrics["hours"] == 3.0 and r.metrics["P_CL_pct"] == pytest.approx(100.0)


def test_outputs_and_rescore(short_run):
    r, out = short_run
    for f in ("config.yaml", "ledger.csv", "events.csv", "metrics.csv", "timings.csv",
              "digest.txt"):
        assert (out / f).exists()
    again = compute_metrics(RunLedger.read(out / "ledger.csv"))
    assert again == pytest.approx(r.metrics)
    assert load_config(out / "config.yaml") == SHORT


def test_same_config_same_digest(short_run):
    assert run_case(SHORT).digest == short_run[0].digest


def test_low_storage_shuts_down():
    cfg = RunConfig(feeder="two_node", duration=4, start_hour=20).with_overrides(
        recourse=False, shutdown_soc=74.9, restart_soc=99.0)
    r = run_case(cfg)
    off = [e for e in r.events if e[3] == "CMG_OFF"]
    assert len(off) == 1 and off[0][0] == 1
    assert r.metrics["T_CMG_OFF_h"] == pytest.approx(3.0)


def test_bad_feeder_is_a_validation_error(tmp_path):
    r = run_case(SHORT.with_overrides(feeder=str(tmp_path / "missing")))
    assert r.exit_code == EXIT_VALIDATION and not r.metrics


def test_sweep_rows(tmp_path):
    cases = grid_cases({"start_hour": [9, 12], "fe_magnitude": [0.0, 10.0]})
    assert cases[1] == {"start_hour": 9, "fe_magnitude": 10.0}
    base = RunConfig(feeder="two_node", duration=1, fe_kind="FE1").with_overrides(recourse=False)
    rows = sweep(base, cases, tmp_path)
    assert len(rows) == 4 and all(c == EXIT_OK for *_, c in rows)
    with open(tmp_path / "sweep.csv") as fh:
        got = list(csv.DictReader(fh))
    assert [int(g["start_hour"]) for g in got] == [9, 9, 12, 12]
    assert all(g["digest"] for g in got)


def test_config_round_trip(tmp_path):
    cfg = SHORT.with_overrides(soc_sched=(25.0, 75.0), seed=4)
    dump_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg
    with pytest.raises(KeyError):
        SHORT.with_overrides(not_a_param=1)
    with pytest.raises(ValueError):
        RunConfig(duration=0)


def test_cli_commands(tmp_path, capsys):
    assert main(["validate", "two_node"]) == 0
    assert main(["validate", str(tmp_path / "nope.yaml")]) == EXIT_VALIDATION
    assert main(["verify-theorems"]) == 0
    # demand over the horizon must exceed the stored energy
    assert main(["verify-theorems", "--horizon", "24"]) == EXIT_VALIDATION
    out = tmp_path / "run"
    assert main(["run", "--feeder", "two_node", "--duration", "2", "--start-hour", "10",
                 "--no-recourse", "--out", str(out)]) == 0
    assert (out / "metrics.csv").exists()
    capsys.readouterr()
    assert main(["metrics", str(out), "--compare", str(out)]) == 0
    assert "P_CL_pct" in capsys.readouterr().out
    assert main(["run", "--set", "bogus=1"]) == EXIT_VALIDATION
