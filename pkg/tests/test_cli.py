from __future__ import annotations

import json
import math
import shutil

import pytest

from conftest import DATA
from cvagrid.cli import EXIT_INPUT, EXIT_NUMERICAL, EXIT_OK, main


@pytest.fixture
def work(tmp_path, monkeypatch):
    shutil.copytree(DATA / "cli", tmp_path / "cli")
    monkeypatch.delenv("CVAGRID_OUTPUT_DIR", raising=False)
    monkeypatch.delenv("CVAGRID_WORKERS", raising=False)
    return tmp_path / "cli"


def _run(work, *extra, command="run"):
    return main([command, "--config", str(work / "config.json"), "--n-paths", "500", *extra])


def _report(work, name="report", out="out"):
    return json.loads((work / out / f"{name}.json").read_text())


def _edit(path, fn):
    d = json.loads(path.read_text())
    fn(d)
    path.write_text(json.dumps(d))


def test_run_writes_report_and_profile(work, capsys):
    assert _run(work) == EXIT_OK
    rep = _report(work)
    assert rep["framework"] == "aggregate"
    assert set(rep["comparison"]) >= {"forward", "backward", "aggregate", "forward_vs_aggregate_z"}
    assert rep["result"]["total"] == pytest.approx(rep["result"]["cva"] - rep["result"]["dva"])
    prov = rep["provenance"]
    assert prov["seed"] == 11 and prov["n_paths"] == 500 and "config_hash" in prov
    lines = (work / "out" / "exposure_profile.csv").read_text().splitlines()
    assert lines[0] == "t,ee,ene" and len(lines) == len(rep["result"]["profile"]["t"]) + 1
    assert (work / "out" / "manifest.json").exists()
    assert "forward vs aggregate" in capsys.readouterr().out


def test_identical_runs_give_identical_reports(work):
    assert _run(work) == EXIT_OK
    first = (work / "out" / "report.json").read_bytes()
    assert _run(work) == EXIT_OK
    assert (work / "out" / "report.json").read_bytes() == first


def test_flags_beat_environment(work, monkeypatch):
    monkeypatch.setenv("CVAGRID_OUTPUT_DIR", str(work / "env_out"))
    assert _run(work) == EXIT_OK
    assert (work / "env_out" / "report.json").exists()
    assert _run(work, "--output-dir", str(work / "flag_out")) == EXIT_OK
    assert (work / "flag_out" / "report.json").exists()


def test_framework_flag(work):
    assert _run(work, "--framework", "forward") == EXIT_OK
    rep = _report(work)
    assert rep["result"]["framework"] == "forward"
    assert rep["result"]["cva"] == rep["comparison"]["forward"]["cva"]


def test_zero_thresholds_remove_counterparty_loss(work):
    _edit(work / "portfolio.json", lambda d: d["netting_set"].update(csa={"rating_thresholds": {"BA": 0.0}}))
    assert _run(work) == EXIT_OK
    assert _report(work)["result"]["cva"] == 0.0


def test_analytics_need_a_base_run(work):
    assert _run(work, "--parallel-shift", "0.0001", command="greeks") == EXIT_INPUT


def test_greeks_incremental_wrongway_after_run(work):
    assert _run(work) == EXIT_OK
    assert _run(work, "--parallel-shift", "0.0001", "--cds-bump", "0.0001", command="greeks") == EXIT_OK
    g = _report(work, "greeks")
    assert math.isfinite(g["rate_delta"]) and set(g["cds_delta"]) == {"CP", "ME"}
    assert g["base_total"] == pytest.approx(_report(work)["result"]["total"], rel=1e-12)

    assert _run(work, "--deal", str(work / "new_deal.json"), command="incremental") == EXIT_OK
    step = _report(work, "incremental")["steps"][0]
    assert step["incremental"] == pytest.approx(step["new_total"] - step["old_total"], rel=1e-12, abs=1e-9)

    assert _run(work, "--correlations", "0,0.5,1.5", command="wrongway") == EXIT_OK
    pts = _report(work, "wrongway")["points"]
    assert "skipped" in pts[2] and "cva" in pts[0]


def test_incremental_against_empty_base_is_standalone(work):
    assert _run(work) == EXIT_OK
    assert _run(work, "--deal", str(work / "new_deal.json"), "--empty-base", command="incremental") == EXIT_OK
    step = _report(work, "incremental")["steps"][0]
    assert step["old_total"] == 0.0 and step["incremental"] == step["new_total"]


def test_boundary_command(work):
    def add(d):
        d["deals"].append({"id": "berm-0", "type": "bermudan_swaption", "exercise_dates": [0, 1, 2, 3],
                           "swap": {"notional": 1e6, "fixed_rate": 0.03, "maturity": 5, "side": "receiver"}})
    _edit(work / "portfolio.json", add)
    assert _run(work, "--deal", "berm-5nc2", command="boundary") == EXIT_INPUT
    assert _run(work, "--deal", "swp-5y", command="boundary") == EXIT_INPUT
    assert _run(work, "--deal", "berm-0", "--rates", "0,0.05,0.2", command="boundary") == EXIT_OK
    pts = _report(work, "boundary")["points"]
    b = [p["boundary"] for p in pts]
    assert all(math.isfinite(x) for x in b)
    # default risk moves the boundary; its direction depends on the deal
    assert b[1] != b[0] and b[2] != b[0]
    assert pts[0]["cva_blind"] == 0.0


def test_bad_config_is_an_input_error(work):
    _edit(work / "config.json", lambda d: d.update(bogus=1))
    assert _run(work) == EXIT_INPUT
    _edit(work / "config.json", lambda d: (d.pop("bogus"), d.update(portfolio="missing.json")))
    assert _run(work) == EXIT_INPUT
    assert main(["run", "--config", str(work / "config.json"), "--n-paths", "10"]) == EXIT_INPUT


def test_calibrate_matrix(tmp_path, capsys):
    out = tmp_path / "cal"
    assert main(["calibrate-matrix", "--pd-table", str(DATA / "table3.csv"), "--out", str(out)]) == EXIT_OK
    rep = json.loads((out / "calibration.json").read_text())
    assert rep["converged"] and len(rep["ratings"]) == 8
    for f in ("matrix.csv", "fitted.csv", "residuals.csv"):
        assert (out / f).exists()
    assert "weighted RMS" in capsys.readouterr().out


def test_calibrate_matrix_failures(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("P(Default),A\n")
    assert main(["calibrate-matrix", "--pd-table", str(bad), "--out", str(tmp_path / "x")]) == EXIT_INPUT
    assert main(["calibrate-matrix", "--pd-table", str(tmp_path / "nope.csv"),
                 "--out", str(tmp_path / "x")]) == EXIT_INPUT
    code = main(["calibrate-matrix", "--pd-table", str(DATA / "table3.csv"), "--max-iterations", "1",
                 "--out", str(tmp_path / "y")])
    assert code == EXIT_NUMERICAL
    # the best-so-far matrix is still written
    assert (tmp_path / "y" / "matrix.csv").exists()
