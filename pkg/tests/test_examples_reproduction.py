"""End-to-end runs of the built-in examples (``pytest --runslow``)."""

import time

import numpy as np
import pytest

from QDSolve.cli import boundary_errors
from QDSolve.core.descent import solve
from QDSolve.core.functional import make_state
from QDSolve.core.problem import get_example
from QDSolve.core.trajectory import GridFunction, TimeGrid


def _strictly_decreasing(result):
    values = [r.objective for r in result.history]
    return all(b < a for a, b in zip(values, values[1:]))


def test_example71_exact_solution_has_zero_objective(example71):
    grid = TimeGrid(1.0, 11)
    x = GridFunction.from_callable(grid, lambda t: np.column_stack([np.zeros_like(t), t]))
    z = GridFunction.from_callable(grid, lambda t: np.column_stack([np.zeros_like(t), np.ones_like(t)]))
    s = make_state(example71, x, z)
    assert s.terms.objective <= 1e-10
    assert np.max(s.residuals.h) == 0.0


@pytest.mark.slow
def test_example71_reproduction(example71):
    started = time.perf_counter()
    result = solve(example71, verbose=False)
    elapsed = time.perf_counter() - started
    final = result.final
    assert result.iterations <= 500
    assert elapsed < 60.0
    assert max(boundary_errors(final).values()) <= 5e-3
    assert final.terms.objective <= 1e-2
    assert np.max(np.abs(final.x.values[:, 0])) <= 5e-2
    assert _strictly_decreasing(result)


@pytest.mark.slow
def test_example72_reproduction():
    spec = get_example("example72")
    result = solve(spec, verbose=False)
    final = result.final
    assert result.iterations <= 500
    assert final.terms.I <= 1e-2
    assert max(boundary_errors(final).values()) <= 1e-2
    assert np.max(final.residuals.h) <= 1e-2
    assert _strictly_decreasing(result)


@pytest.mark.slow
def test_example73_reproduction():
    spec = get_example("example73")
    result = solve(spec, verbose=False)
    final = result.final
    x = final.x.values
    assert abs(x[-1, 2]) <= 1e-2
    assert np.max(np.abs(x[:, 3])) <= 2e-2
    assert np.max(np.abs(x[:, 0] + 1.053)) <= 2e-2
    assert final.terms.objective <= 1e-2
    assert np.array_equal(x[0], spec.x0)
    assert _strictly_decreasing(result)


@pytest.mark.slow
@pytest.mark.parametrize("name", ["dryfriction", "pendulum", "twodiscs"])
def test_remaining_examples_descend_to_termination(name):
    spec = get_example(name)
    result = solve(spec, verbose=False)
    assert result.status in ("solution", "stationary", "stalled", "max_iter")
    assert result.iterations == len(result.history) <= spec.params.max_iter
    assert _strictly_decreasing(result)
    assert result.final.terms.objective <= result.history[0].objective
