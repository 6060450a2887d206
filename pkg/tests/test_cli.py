import json
import subprocess
import sys

import pytest

from clusterlag.cli import main
from clusterlag.scenarios import random_quadratic, save_problem


def test_flat_cost_solve_exit_codes(tmp_path):
    assert main(["solve", "--scenario", "appendixB", "--rho", "1", "--t-end", "100",
                 "--out", str(tmp_path / "a")]) == 0
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["convergence"]["converged"] and rep["final"]["cost"] == pytest.approx(0.0, abs=1e-9)
    assert main(["solve", "--scenario", "appendixB", "--rho", "0", "--t-end", "100",
                 "--out", str(tmp_path / "b")]) == 2
    assert (tmp_path / "b" / "trajectory.csv").exists()


def test_solve_is_deterministic(tmp_path):
    args = ["solve", "--scenario", "example1", "--epsilon", "0.5", "--t-end", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 2
    assert main(args + ["--out", str(tmp_path / "b")]) == 2
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert a == (tmp_path / "b" / "trajectory.csv").read_bytes()
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert rep["communication_counts"] == {"1": 1, "2": 1, "3": 2, "4": 2, "5": 1, "6": 1}
    assert rep["penalty"]["gamma"] == pytest.approx(345.43, abs=0.05)


def test_problem_file_solve(tmp_path):
    path = tmp_path / "p.json"
    save_problem(random_quadratic(4, boxed=False), path, integration={"t_end": 300, "step": 1e-3})
    assert main(["solve", "--problem", str(path), "--out", str(tmp_path / "o")]) == 0
    rep = json.loads((tmp_path / "o" / "report.json").read_text())
    assert rep["oracle"]["max_abs_error"] < 1e-4
    assert rep["convergence"]["rate"] < 0


def test_invalid_configurations(tmp_path, capsys):
    assert main(["solve", "--scenario", "table1", "--out", str(tmp_path)]) == 3
    bad = random_quadratic(2)
    path = tmp_path / "bad.json"
    save_problem(bad, path)
    d = json.loads(path.read_text())
    d["agents"][0]["lower"] = [5.0] * len(d["agents"][0]["lower"])
    d["agents"][0]["upper"] = [4.0] * len(d["agents"][0]["upper"])
    path.write_text(json.dumps(d))
    assert main(["solve", "--problem", str(path), "--out", str(tmp_path)]) == 3
    d = json.loads(path.read_text())
    d["graph"]["edges"] = []
    path.write_text(json.dumps(d))
    assert main(["oracle", "--problem", str(path)]) == 3
    assert "invalid configuration" in capsys.readouterr().err


def test_bounds_command(tmp_path, capsys):
    assert main(["bounds", "--scenario", "table1", "--seed", "7", "--distributed", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "bounds.json").read_text())
    assert rep["bounds"]["single_constraint"]["value"] >= rep["oracle_mu_max"] - 1e-9
    assert rep["gamma_auto"] > 0 and "max_consensus_grad_bound" in rep
    assert main(["bounds", "--scenario", "example2"]) == 3


def test_oracle_command(tmp_path):
    assert main(["oracle", "--scenario", "example1", "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "oracle.json").read_text())
    assert rep["kkt_residual"]["stationarity"] < 1e-8 and rep["licq"]
    x = [v for vals in rep["x_by_agent"].values() for v in vals] if "x_by_agent" in rep else rep["x_star"]
    assert sum(x) > 0


def test_check_command(tmp_path):
    assert main(["check", "--out", str(tmp_path)]) == 0
    results = json.loads((tmp_path / "check.json").read_text())
    assert all(r["passed"] for r in results)


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "clusterlag", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("solve", "bounds", "check", "oracle"):
        assert cmd in out.stdout
