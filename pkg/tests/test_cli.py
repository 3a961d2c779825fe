import json

import numpy as np
import pytest

from QDSolve.cli import EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, main


@pytest.fixture
def unit_rate_file(tmp_path):
    """x' in [1, 1], x(0) = 0, x(1) = 1, started at the exact solution."""
    path = tmp_path / "unit_rate.json"
    path.write_text(
        json.dumps(
            {
                "name": "unit_rate",
                "n": 1,
                "T": 1.0,
                "x0": [0],
                "terminal": [{"index": 1, "value": 1}],
                "channels": [{"max_terms": [["1"]]}],
                "initial": {"x": ["t"], "z": ["1"]},
            }
        )
    )
    return str(path)


def _solve_exact(unit_rate_file, out):
    return main(["solve", unit_rate_file, "--out", str(out), "--quiet"])


def test_solve_writes_outputs(unit_rate_file, tmp_path):
    out = tmp_path / "run"
    assert _solve_exact(unit_rate_file, out) == EXIT_OK
    assert (out / "trajectory.csv").read_text().splitlines()[0] == "t,x1,z1,h1"
    history = (out / "history.csv").read_text().splitlines()
    assert history[0].startswith("k,objective")
    assert len(history) == 2
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "solution"
    assert summary["max_boundary_error"] == pytest.approx(0.0, abs=1e-12)
    run_log = (out / "solve.log").read_text()
    assert "solve unit_rate" in run_log and "status=solution" in run_log


def test_solve_without_convergence_exits_two(tmp_path):
    out = tmp_path / "run"
    code = main(["solve", "example71", "--max-iter", "1", "--out", str(out), "--quiet"])
    assert code == EXIT_NOT_CONVERGED
    assert (out / "summary.json").exists()


def test_missing_problem_file(tmp_path, capsys):
    code = main(["solve", str(tmp_path / "missing.json"), "--quiet"])
    assert code == EXIT_ERROR
    assert capsys.readouterr().err.startswith("file not found")


def test_invalid_lambda(unit_rate_file, tmp_path, capsys):
    code = main(["solve", unit_rate_file, "--lambda", "0", "--out", str(tmp_path / "run"), "--quiet"])
    assert code == EXIT_ERROR
    assert "penalty" in capsys.readouterr().err


def test_malformed_problem_file(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"name": "bad", "n": 1, "T": 1, "x0": [0], "channels": [{"max_terms": [["x1 +"]]}]}))
    assert main(["solve", str(path), "--quiet"]) == EXIT_ERROR
    assert "channels[0].max_terms[0][0]" in capsys.readouterr().err


def test_examples_listing(capsys):
    assert main(["examples"]) == EXIT_OK
    out = capsys.readouterr().out
    for name in ("example71", "example72", "example73"):
        assert name in out
    # problem-file references are listed beside the names
    for ref in ("7.1", "7.2", "7.3"):
        assert ref in out
    assert "reference" in out


def test_examples_filter(capsys):
    assert main(["examples", "two"]) == EXIT_OK
    assert "twodiscs" in capsys.readouterr().out
    assert main(["examples", "nosuch"]) == EXIT_ERROR
    assert "unknown example" in capsys.readouterr().err


def test_check_accepts_exact_state(unit_rate_file, tmp_path):
    out = tmp_path / "run"
    _solve_exact(unit_rate_file, out)
    state = str(out / "trajectory.csv")
    assert main(["check", unit_rate_file, "--state", state]) == EXIT_OK


def test_check_rejects_perturbed_state(unit_rate_file, tmp_path):
    out = tmp_path / "run"
    _solve_exact(unit_rate_file, out)
    path = out / "trajectory.csv"
    header = path.read_text().splitlines()[0]
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    table[:, 2] += 0.5
    perturbed = tmp_path / "perturbed.csv"
    np.savetxt(perturbed, table, delimiter=",", header=header, comments="")
    assert main(["check", unit_rate_file, "--state", str(perturbed)]) == EXIT_NOT_CONVERGED


def test_check_dumps_node_pair(unit_rate_file, tmp_path, capsys):
    out = tmp_path / "run"
    _solve_exact(unit_rate_file, out)
    state = str(out / "trajectory.csv")
    capsys.readouterr()
    assert main(["check", unit_rate_file, "--state", state, "--dump-node", "0"]) == EXIT_OK
    assert '"dimension": 2' in capsys.readouterr().out
    assert main(["check", unit_rate_file, "--state", state, "--dump-node", "99"]) == EXIT_ERROR


def test_check_rejects_non_uniform_grid(unit_rate_file, tmp_path, capsys):
    path = tmp_path / "state.csv"
    path.write_text("t,x1,z1\n0,0,1\n0.3,0.3,1\n1,1,1\n")
    assert main(["check", unit_rate_file, "--state", str(path)]) == EXIT_ERROR
    assert "uniform" in capsys.readouterr().err
