from __future__ import annotations

import importlib.util
import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

# the repository root is the QDSolve package itself
if "QDSolve" not in sys.modules:
    _spec = importlib.util.spec_from_file_location(
        "QDSolve", ROOT / "__init__.py", submodule_search_locations=[str(ROOT)]
    )
    _module = importlib.util.module_from_spec(_spec)
    sys.modules["QDSolve"] = _module
    _spec.loader.exec_module(_module)


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run end-to-end reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _isolated_logs(tmp_path, monkeypatch):
    from QDSolve.core import logger

    monkeypatch.setattr(logger, "LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(logger, "LOG_FILE", str(tmp_path / "logs" / "qdsolve.log"))
    (tmp_path / "logs").mkdir()


@pytest.fixture
def make_problem():
    """Build a ProblemSpec from a dict in problem-file form."""
    from QDSolve.core.problem import parse_problem_text

    def _make(**fields):
        data = {"name": "test", "T": 1.0}
        data.update(fields)
        return parse_problem_text(json.dumps(data))

    return _make


@pytest.fixture
def example71():
    from QDSolve.core.problem import get_example

    return get_example("example71")
