"""Euclidean projection onto convex hulls and the node descent direction."""

from __future__ import annotations

from typing import List, Optional, Tuple

import numpy as np

from QDSolve.core.errors import NumericalFailure
from QDSolve.core.quasidiff import GeneratorPolytope, QuasiDiffPair

_WOLFE_TOL = 1e-10
_ALPHA_TOL = 1e-14
_MAX_STEPS = 10_000


def _affine_minimizer(C: np.ndarray) -> np.ndarray:
    """Weights of the min-norm point of the affine hull of the rows of C.

    Solves the KKT system [[0, 1^T], [1, C C^T]] [mu, alpha] = [1, 0].
    """
    k = C.shape[0]
    M = np.zeros((k + 1, k + 1))
    M[0, 1:] = 1.0
    M[1:, 0] = 1.0
    M[1:, 1:] = C @ C.T
    rhs = np.zeros(k + 1)
    rhs[0] = 1.0
    sol = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return sol[1:]


def _wolfe(P: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Minimum-norm point of co(rows of P). Returns (point, weights over rows)."""
    m = P.shape[0]
    scale = max(1.0, float(np.max(np.sum(P * P, axis=1))))
    first = int(np.argmin(np.sum(P * P, axis=1)))
    corral: List[int] = [first]
    lam = np.array([1.0])
    x = P[first].copy()

    for step in range(_MAX_STEPS):
        dots = P @ x
        j = int(np.argmin(dots))
        if x @ x - dots[j] <= _WOLFE_TOL * scale or j in corral:
            weights = np.zeros(m)
            weights[corral] = lam
            return x, weights
        corral.append(j)
        lam = np.append(lam, 0.0)

        while True:
            C = P[corral]
            alpha = _affine_minimizer(C)
            if np.all(alpha > _ALPHA_TOL):
                lam = alpha
                x = alpha @ C
                break
            neg = alpha <= _ALPHA_TOL
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = lam[neg] / (lam[neg] - alpha[neg])
            ratios = ratios[np.isfinite(ratios)]
            theta = float(np.clip(np.min(ratios), 0.0, 1.0)) if ratios.size else 0.0
            lam = theta * alpha + (1.0 - theta) * lam
            keep = lam > _ALPHA_TOL
            if not np.any(keep):
                keep[int(np.argmax(lam))] = True
            corral = [c for c, k in zip(corral, keep) if k]
            lam = lam[keep] / np.sum(lam[keep])
            x = lam @ P[corral]
    raise NumericalFailure(
        "nearest-point iteration cap exceeded",
        diagnostics={"points": m, "dimension": P.shape[1], "cap": _MAX_STEPS},
    )


def nearest_point(target: np.ndarray, cloud: np.ndarray) -> Tuple[np.ndarray, float, np.ndarray]:
    """Projection of ``target`` onto co(cloud): (point, distance, convex weights)."""
    cloud = np.atleast_2d(np.asarray(cloud, dtype=float))
    target = np.asarray(target, dtype=float)
    if cloud.shape[0] == 0:
        raise ValueError("nearest_point needs a nonempty cloud")
    if cloud.shape[0] == 1:
        point = cloud[0].copy()
        return point, float(np.linalg.norm(point - target)), np.ones(1)
    shift, weights = _wolfe(cloud - target[None, :])
    point = weights @ cloud
    return point, float(np.linalg.norm(shift)), weights


def hausdorff_deviation(
    B_neg: GeneratorPolytope, A: GeneratorPolytope, node: Optional[int] = None
) -> Tuple[float, np.ndarray, np.ndarray]:
    """max over points w of ``B_neg`` of dist(w, A); returns (value, w, projection of w)."""
    if B_neg.dimension != A.dimension:
        raise ValueError(f"dimension mismatch: {B_neg.dimension} vs {A.dimension}")
    candidates = B_neg.enumerate_points(node=node)
    hull = A.enumerate_points(node=node)
    best = -1.0
    best_w = candidates[0]
    best_a = hull[0]
    for w in candidates:
        a, dist, _ = nearest_point(w, hull)
        if dist > best:
            best, best_w, best_a = dist, w, a
    return best, best_w.copy(), best_a


def node_direction(pair: QuasiDiffPair, node: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """Direction G = -(v + w) for the worst w in B and its nearest v in A."""
    deviation, w_neg, a = hausdorff_deviation(-pair.B, pair.A, node=node)
    # w = -w_neg lies in B, v = a; G = -(v + w)
    return w_neg - a, deviation
