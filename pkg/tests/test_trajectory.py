import numpy as np
import pytest

from QDSolve.core.errors import GridMismatchError
from QDSolve.core.trajectory import (
    GridFunction,
    TimeGrid,
    axpy,
    cumulative_integral,
    interpolant_l2_distance,
    interpolate_directions,
    quadrature,
    tail_integral_adjoint,
    to_csv_rows,
)


def test_grid_nodes_and_weights():
    grid = TimeGrid(1.0, 11)
    assert grid.step == pytest.approx(0.1)
    assert grid.nodes[0] == 0.0 and grid.nodes[-1] == 1.0
    assert grid.weights.sum() == pytest.approx(1.0)


@pytest.mark.parametrize("T, N", [(1.0, 1), (0.0, 5), (-1.0, 5)])
def test_invalid_grid(T, N):
    with pytest.raises(ValueError):
        TimeGrid(T, N)


def test_evaluation_interpolates_linearly():
    grid = TimeGrid(1.0, 3)
    f = GridFunction(grid, np.array([[0.0, 1.0], [1.0, 1.0], [0.0, 3.0]]))
    assert np.allclose(f(0.25), [0.5, 1.0])
    assert np.allclose(f(0.75), [0.5, 2.0])


def test_evaluation_outside_interval_fails():
    f = GridFunction.zeros(TimeGrid(1.0, 3), 1)
    with pytest.raises(ValueError):
        f(1.5)
    with pytest.raises(ValueError):
        f(-0.1)


def test_values_must_align_with_grid():
    with pytest.raises(GridMismatchError):
        GridFunction(TimeGrid(1.0, 4), np.zeros((3, 2)))


def test_trapezoid_is_exact_for_linear():
    grid = TimeGrid(2.0, 5)
    f = GridFunction.from_callable(grid, lambda t: 3 * t + 1)
    assert quadrature(f) == pytest.approx(8.0)


def test_quadrature_of_square_converges():
    errors = []
    for N in (11, 21, 41):
        grid = TimeGrid(1.0, N)
        errors.append(abs(quadrature(GridFunction.from_callable(grid, lambda t: t ** 2)) - 1 / 3))
    assert errors[1] < errors[0] / 3.5
    assert errors[2] < errors[1] / 3.5


def test_cumulative_integral_end_matches_quadrature_exactly():
    rng = np.random.default_rng(0)
    grid = TimeGrid(1.3, 17)
    f = GridFunction(grid, rng.normal(size=grid.N))
    prefix = cumulative_integral(f)
    assert prefix.values[0, 0] == 0.0
    assert prefix.values[-1, 0] == quadrature(f)


def test_quadrature_rejects_vector_functions():
    with pytest.raises(GridMismatchError):
        quadrature(GridFunction.zeros(TimeGrid(1.0, 3), 2))


def test_tail_integral_adjoint_identity():
    rng = np.random.default_rng(3)
    grid = TimeGrid(1.0, 9)
    s = rng.normal(size=(grid.N, 2))
    z = GridFunction(grid, rng.normal(size=(grid.N, 2)))
    lhs = np.sum(s * cumulative_integral(z).values)
    rhs = np.sum(tail_integral_adjoint(grid, s) * z.values)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_axpy_and_mismatch():
    grid = TimeGrid(1.0, 4)
    x = GridFunction.constant(grid, [1.0, 2.0])
    y = GridFunction.constant(grid, [0.5, 0.5])
    assert np.allclose(axpy(2.0, x, y).values, [[2.5, 4.5]] * 4)
    with pytest.raises(GridMismatchError):
        axpy(1.0, x, GridFunction.zeros(TimeGrid(1.0, 5), 2))
    with pytest.raises(GridMismatchError):
        axpy(1.0, x, GridFunction.zeros(grid, 3))


def test_inner_and_norm():
    grid = TimeGrid(1.0, 5)
    f = GridFunction.constant(grid, [3.0, 4.0])
    assert f.l2_norm() == pytest.approx(5.0)
    assert f.inner(GridFunction.constant(grid, [1.0, 0.0])) == pytest.approx(3.0)


def test_interpolate_directions_requires_every_node():
    grid = TimeGrid(1.0, 3)
    samples = [(t, [t, -t]) for t in grid.nodes]
    G = interpolate_directions(samples, grid)
    assert np.allclose(G.values[:, 1], -grid.nodes)
    with pytest.raises(GridMismatchError):
        interpolate_directions(samples[:2], grid)


def test_interpolation_error_decreases_for_jump():
    """Piecewise-linear interpolation of a unit jump at t = 1/3, never a grid node."""
    def jump(t):
        return (np.asarray(t) >= 1.0 / 3.0).astype(float)

    errors = []
    for N in (11, 21, 41, 81):
        grid = TimeGrid(1.0, N)
        errors.append(interpolant_l2_distance(GridFunction.from_callable(grid, jump), jump, refine=2048))
    assert all(b < a for a, b in zip(errors, errors[1:]))
    assert errors[-1] <= 0.13 * errors[0]


def test_csv_rows_layout():
    grid = TimeGrid(1.0, 3)
    rows = to_csv_rows(grid, [np.ones(3), np.arange(3.0)])
    assert rows.shape == (3, 3)
    assert np.allclose(rows[:, 0], grid.nodes)
