import itertools

import numpy as np
import pytest

from QDSolve.core import geometry
from QDSolve.core.errors import NumericalFailure
from QDSolve.core.geometry import hausdorff_deviation, nearest_point, node_direction
from QDSolve.core.quasidiff import GeneratorPolytope, QuasiDiffPair, directional_derivative


def _brute_force_distance(target, cloud):
    """Smallest distance over every affinely-feasible subset of the cloud."""
    P = cloud - target[None, :]
    best = np.inf
    for r in range(1, P.shape[0] + 1):
        for subset in itertools.combinations(range(P.shape[0]), r):
            C = P[list(subset)]
            k = len(subset)
            M = np.zeros((k + 1, k + 1))
            M[0, 1:] = 1.0
            M[1:, 0] = 1.0
            M[1:, 1:] = C @ C.T
            rhs = np.zeros(k + 1)
            rhs[0] = 1.0
            alpha = np.linalg.lstsq(M, rhs, rcond=None)[0][1:]
            if np.all(alpha >= -1e-12):
                best = min(best, float(np.linalg.norm(alpha @ C)))
    return best


def test_triangle_projection():
    cloud = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    point, dist, weights = nearest_point(np.zeros(2), cloud)
    assert np.allclose(point, [0.5, 0.5])
    assert dist == pytest.approx(np.sqrt(0.5))
    assert np.allclose(weights, [0.5, 0.5, 0.0])


def test_target_inside_hull():
    cloud = np.array([[-1.0, -1.0], [2.0, -1.0], [0.0, 3.0]])
    point, dist, _ = nearest_point(np.array([0.2, 0.1]), cloud)
    assert dist == pytest.approx(0.0, abs=1e-6)
    assert np.allclose(point, [0.2, 0.1], atol=1e-6)


def test_single_point_cloud():
    point, dist, weights = nearest_point(np.array([3.0, 4.0]), np.array([[0.0, 0.0]]))
    assert dist == pytest.approx(5.0)
    assert np.allclose(point, 0.0) and np.allclose(weights, [1.0])


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        nearest_point(np.zeros(2), np.zeros((0, 2)))


def _random_cloud(rng):
    """Cloud of 1..8 points in dimension 1..6, sometimes with a repeated point."""
    d = int(rng.integers(1, 7))
    m = int(rng.integers(1, 9))
    cloud = rng.normal(size=(m, d))
    if m > 2 and rng.random() < 0.3:
        cloud[-1] = cloud[0]
    return cloud


def test_matches_subset_enumeration():
    rng = np.random.default_rng(21)
    for _ in range(200):
        cloud = _random_cloud(rng)
        target = rng.normal(size=cloud.shape[1]) * 2.0
        point, dist, weights = nearest_point(target, cloud)
        expected = _brute_force_distance(target, cloud)
        assert dist == pytest.approx(expected, abs=1e-7)
        assert dist >= expected - 1e-9
        assert weights.min() >= 0.0 and weights.sum() == pytest.approx(1.0)
        assert np.allclose(weights @ cloud, point)


def test_projection_is_idempotent_and_scale_equivariant():
    rng = np.random.default_rng(8)
    cloud = rng.normal(size=(6, 4))
    target = rng.normal(size=4) * 3.0
    point, _, _ = nearest_point(target, cloud)
    again, dist, _ = nearest_point(point, cloud)
    assert dist == pytest.approx(0.0, abs=1e-5)
    assert np.allclose(again, point, atol=1e-5)
    scaled, _, _ = nearest_point(2.5 * target, 2.5 * cloud)
    assert np.allclose(scaled, 2.5 * point, atol=1e-7)


def test_iteration_cap_raises(monkeypatch):
    monkeypatch.setattr(geometry, "_MAX_STEPS", 0)
    with pytest.raises(NumericalFailure) as info:
        nearest_point(np.zeros(2), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert info.value.diagnostics["points"] == 2


def test_hausdorff_deviation_matches_brute_force():
    rng = np.random.default_rng(13)
    # generator set sizes keep A at <= 8 points and -B at <= 4
    a_shapes = [(2,), (3,), (4,), (2, 2), (2, 3), (2, 4), (8,)]
    b_shapes = [(), (2,), (3,), (2, 2)]
    for _ in range(200):
        d = int(rng.integers(1, 7))
        a_sets = [rng.normal(size=(k, d)) for k in a_shapes[int(rng.integers(len(a_shapes)))]]
        b_sets = [rng.normal(size=(k, d)) for k in b_shapes[int(rng.integers(len(b_shapes)))]]
        if a_sets and rng.random() < 0.3:
            a_sets[0][-1] = a_sets[0][0]
        A = GeneratorPolytope.build(rng.normal(size=d), a_sets)
        B = GeneratorPolytope.build(rng.normal(size=d), b_sets)
        value, w, a = hausdorff_deviation(-B, A)
        hull = A.enumerate_points()
        expected = max(_brute_force_distance(p, hull) for p in (-B).enumerate_points())
        assert value == pytest.approx(expected, abs=1e-7)
        assert np.linalg.norm(w - a) == pytest.approx(value, abs=1e-7)


def test_direction_for_singletons():
    pair = QuasiDiffPair(GeneratorPolytope.point([1.0, 0.0]), GeneratorPolytope.point([0.0, 2.0]))
    G, dev = node_direction(pair)
    assert np.allclose(G, [-1.0, -2.0])
    assert dev == pytest.approx(np.sqrt(5.0))


def test_direction_vanishes_when_minus_b_inside_a():
    A = GeneratorPolytope.build([0.0, 0.0], [[[1.0, 0.0], [-1.0, 0.0]]])
    G, dev = node_direction(QuasiDiffPair(A, GeneratorPolytope.zero(2)))
    assert np.allclose(G, 0.0)
    assert dev == pytest.approx(0.0)


def test_deviation_ties_pick_first_point():
    B = GeneratorPolytope.build([0.0, 0.0], [[[1.0, 0.0], [-1.0, 0.0]]])
    G, dev = node_direction(QuasiDiffPair(GeneratorPolytope.zero(2), B))
    assert dev == pytest.approx(1.0)
    assert np.allclose(G, [-1.0, 0.0])


def test_direction_is_a_descent_direction():
    rng = np.random.default_rng(17)
    for _ in range(20):
        A = GeneratorPolytope.build(rng.normal(size=4), [rng.normal(size=(3, 4))])
        B = GeneratorPolytope.build(rng.normal(size=4), [rng.normal(size=(2, 4))])
        G, dev = node_direction(QuasiDiffPair(A, B))
        assert np.linalg.norm(G) == pytest.approx(dev, abs=1e-8)
        assert directional_derivative(QuasiDiffPair(A, B), G) <= -dev ** 2 + 1e-7
