"""Merit functional I = phi + chi + omega + upsilon and the penalised objective."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from QDSolve.core.errors import ExpressionDomainError
from QDSolve.core.logger import _log
from QDSolve.core.models import Channel, ProblemSpec, SolverParams, SupportModel
from QDSolve.core.problem import eval_support
from QDSolve.core.trajectory import (
    GridFunction,
    TimeGrid,
    cumulative_integral,
    quadrature,
    quadrature_components,
    tail_integral_adjoint,
)

_TIE_TOL = 1e-6
_POLISH_WIDTH = 1e-8
_INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class MeritTerms:
    phi: float
    chi: float
    omega: float
    upsilon: float
    cost: float
    penalty: float
    has_cost: bool

    @property
    def I(self) -> float:
        return self.phi + self.chi + self.omega + self.upsilon

    @property
    def objective(self) -> float:
        if self.has_cost:
            return self.cost + self.penalty * self.I
        return self.I


@dataclass(frozen=True)
class ResidualField:
    """Per-node ψ* and distances.

    ``h`` has one column per channel (per-coordinate mode) or a single column
    (vector mode); ``psi`` is N×n in both modes.
    """

    h: np.ndarray
    psi: np.ndarray
    unique: np.ndarray

    @property
    def nonunique_count(self) -> int:
        return int(np.count_nonzero(~self.unique))


# ── ψ* searches ──────────────────────────────────────────────────


def _node_env(x: np.ndarray, u: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    x = np.asarray(x, dtype=float)
    env = {f"x{k + 1}": x[..., k] for k in range(x.shape[-1])}
    if u is not None:
        u = np.asarray(u, dtype=float)
        env.update({f"u{k + 1}": u[..., k] for k in range(u.shape[-1])})
    return env


def psi_star(
    channel: Channel,
    x_t: np.ndarray,
    z_t_i,
    u_t: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Maximiser of l(psi) = z*psi - c(F_i(x), psi) over psi in {+1, -1}.

    Vectorised over leading axes of ``x_t``. Returns ``(psi, h)``; psi is +1
    whenever h = 0. Equation channels use the residual ``z - rhs`` directly.
    """
    x_t = np.asarray(x_t, dtype=float)
    z = np.asarray(z_t_i, dtype=float)
    if channel.is_equation:
        residual = z - channel.rhs.evaluate(_node_env(x_t, u_t))
        psi = np.where(residual < 0, -1.0, 1.0)
        return psi, np.abs(residual)
    ones = np.ones(x_t.shape[:-1])
    ell_plus = z - eval_support(channel.model, x_t, ones)
    ell_minus = -z - eval_support(channel.model, x_t, -ones)
    h = np.maximum(0.0, np.maximum(ell_plus, ell_minus))
    psi = np.where((ell_minus > ell_plus) & (h > 0), -1.0, 1.0)
    return psi, h


def _ell_vector(model: SupportModel, x: np.ndarray, z: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """l(psi) = <z, psi> - c(F(x), psi) for psi of shape (N, K, n)."""
    c = eval_support(model, x[:, None, :], psi)
    return np.sum(z[:, None, :] * psi, axis=-1) - c


def _golden_max(fn: Callable[[np.ndarray], np.ndarray], lo: np.ndarray, hi: np.ndarray, width: float):
    """Golden-section maximisation run on many independent intervals at once."""
    a, b = lo.copy(), hi.copy()
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(200):
        if np.all(b - a <= width):
            break
        right = fc < fd
        a = np.where(right, c, a)
        b = np.where(right, b, d)
        new_c = np.where(right, d, b - _INV_PHI * (b - a))
        new_d = np.where(right, a + _INV_PHI * (b - a), c)
        trial = np.where(right, new_d, new_c)
        fp = fn(trial)
        fc, fd = np.where(right, fd, fp), np.where(right, fp, fc)
        c, d = new_c, new_d
    take_c = fc >= fd
    return np.where(take_c, c, d), np.where(take_c, fc, fd)


def _circle(theta: np.ndarray) -> np.ndarray:
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def _sphere(polar: np.ndarray, azimuth: np.ndarray) -> np.ndarray:
    s = np.sin(polar)
    return np.stack([s * np.cos(azimuth), s * np.sin(azimuth), np.cos(polar)], axis=-1)


def _search_circle(model: SupportModel, x: np.ndarray, z: np.ndarray, samples: int):
    N = x.shape[0]
    step = 2.0 * np.pi / samples
    theta = step * np.arange(samples)
    values = _ell_vector(model, x, z, np.broadcast_to(_circle(theta), (N, samples, 2)))

    peaks = (values >= np.roll(values, 1, axis=1)) & (values >= np.roll(values, -1, axis=1))
    first = np.argmax(values, axis=1)
    sep = np.abs(np.arange(samples)[None, :] - first[:, None])
    sep = np.minimum(sep, samples - sep)
    others = np.where(peaks & (sep > 2), values, -np.inf)
    second = np.argmax(others, axis=1)
    has_second = np.isfinite(others[np.arange(N), second])

    def polish(idx: np.ndarray):
        centre = theta[idx]
        fn = lambda th: _ell_vector(model, x, z, _circle(th)[:, None, :])[:, 0]
        best_theta, best_val = _golden_max(fn, centre - step, centre + step, _POLISH_WIDTH)
        sampled = values[np.arange(N), idx]
        keep = sampled > best_val
        return np.where(keep, centre, best_theta), np.where(keep, sampled, best_val)

    th1, v1 = polish(first)
    th2, v2 = polish(np.where(has_second, second, first))
    tie = has_second & (np.abs(v1 - v2) <= _TIE_TOL)
    use_second = has_second & ((v2 > v1 + _TIE_TOL) | (tie & (second < first)))
    theta_star = np.where(use_second, th2, th1)
    value = np.where(use_second, v2, v1)
    return _circle(theta_star), value, ~tie


def _search_sphere(model: SupportModel, x: np.ndarray, z: np.ndarray, grid: Tuple[int, int]):
    N = x.shape[0]
    P, Q = grid
    d_polar, d_azim = np.pi / P, 2.0 * np.pi / Q
    polar = d_polar * (np.arange(P) + 0.5)
    azim = d_azim * np.arange(Q)
    pp, aa = np.meshgrid(polar, azim, indexing="ij")
    dirs = _sphere(pp, aa).reshape(P * Q, 3)
    values = _ell_vector(model, x, z, np.broadcast_to(dirs, (N, P * Q, 3))).reshape(N, P, Q)

    padded = np.pad(values, ((0, 0), (1, 1), (0, 0)), constant_values=-np.inf)
    peaks = (
        (values >= np.roll(values, 1, axis=2))
        & (values >= np.roll(values, -1, axis=2))
        & (values >= padded[:, :-2, :])
        & (values >= padded[:, 2:, :])
    ).reshape(N, P * Q)
    flat = values.reshape(N, P * Q)
    first = np.argmax(flat, axis=1)
    cos_sep = dirs @ dirs[first].T  # (P*Q, N)
    window = 2.0 * max(d_polar, d_azim)
    others = np.where(peaks & (cos_sep.T < np.cos(window)), flat, -np.inf)
    second = np.argmax(others, axis=1)
    has_second = np.isfinite(others[np.arange(N), second])

    def polish(idx: np.ndarray):
        p0, a0 = pp.ravel()[idx], aa.ravel()[idx]
        p, a = p0.copy(), a0.copy()
        for _ in range(2):
            fp = lambda v: _ell_vector(model, x, z, _sphere(v, a)[:, None, :])[:, 0]
            p, _ = _golden_max(fp, np.clip(p - d_polar, 0.0, np.pi), np.clip(p + d_polar, 0.0, np.pi), _POLISH_WIDTH)
            fa = lambda v: _ell_vector(model, x, z, _sphere(p, v)[:, None, :])[:, 0]
            a, val = _golden_max(fa, a - d_azim, a + d_azim, _POLISH_WIDTH)
        sampled = flat[np.arange(N), idx]
        keep = sampled > val
        return np.where(keep, p0, p), np.where(keep, a0, a), np.where(keep, sampled, val)

    p1, a1, v1 = polish(first)
    p2, a2, v2 = polish(np.where(has_second, second, first))
    tie = has_second & (np.abs(v1 - v2) <= _TIE_TOL)
    use_second = has_second & ((v2 > v1 + _TIE_TOL) | (tie & (second < first)))
    psi = _sphere(np.where(use_second, p2, p1), np.where(use_second, a2, a1))
    return psi, np.where(use_second, v2, v1), ~tie


def sphere_field(
    model: SupportModel, x: np.ndarray, z: np.ndarray, params: SolverParams
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised sphere search over nodes: returns psi (N×n), h (N,), unique (N,)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    N, n = z.shape
    if n == 1:
        cand = np.array([[1.0], [-1.0]])
        values = _ell_vector(model, x, z, np.broadcast_to(cand, (N, 2, 1)))
        pick = np.where(values[:, 1] > values[:, 0] + _TIE_TOL, 1, 0)
        psi, value = cand[pick], values[np.arange(N), pick]
        unique = np.abs(values[:, 0] - values[:, 1]) > _TIE_TOL
    elif n == 2:
        psi, value, unique = _search_circle(model, x, z, params.sphere_samples)
    elif n == 3:
        psi, value, unique = _search_sphere(model, x, z, params.sphere_grid)
    else:
        raise ValueError(f"sphere search supports n <= 3, got n={n}")
    h = np.maximum(0.0, value)
    inactive = h <= 0
    fixed = np.zeros(n)
    fixed[0] = 1.0
    psi = np.where(inactive[:, None], fixed[None, :], psi)
    unique = unique | inactive
    return psi, h, unique


def psi_star_sphere(
    model: SupportModel, x_t: np.ndarray, z_t: np.ndarray, params: Optional[SolverParams] = None
) -> Tuple[np.ndarray, float, bool]:
    """Maximiser of <z, psi> - c(F(x), psi) over the unit sphere (n <= 3)."""
    params = params or SolverParams()
    psi, h, unique = sphere_field(model, np.asarray(x_t)[None, :], np.asarray(z_t)[None, :], params)
    if not unique[0]:
        _log(f"psi* not unique at x={np.round(x_t, 6).tolist()} z={np.round(z_t, 6).tolist()}; using first maximiser")
    return psi[0], float(h[0]), bool(unique[0])


# ── state ────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EvalState:
    """Trajectory (x, z, u) on a grid with lazily computed derived data.

    Instances are immutable; a step produces a new state, so derived caches
    never go stale.
    """

    spec: ProblemSpec
    params: SolverParams
    x: GridFunction
    z: GridFunction
    u: GridFunction

    @classmethod
    def from_decision(cls, spec: ProblemSpec, params: SolverParams, grid: TimeGrid, values: np.ndarray) -> "EvalState":
        n, nu = spec.n, spec.nu
        values = np.asarray(values, dtype=float).reshape(grid.N, 2 * n + nu)
        return cls(
            spec,
            params,
            GridFunction(grid, values[:, :n]),
            GridFunction(grid, values[:, n:2 * n]),
            GridFunction(grid, values[:, 2 * n:]),
        )

    @property
    def grid(self) -> TimeGrid:
        return self.x.grid

    @cached_property
    def decision(self) -> np.ndarray:
        return np.hstack([self.x.values, self.z.values, self.u.values])

    def step(self, gamma: float, G: GridFunction) -> "EvalState":
        return EvalState.from_decision(self.spec, self.params, self.grid, self.decision + gamma * G.values)

    @cached_property
    def integral_z(self) -> GridFunction:
        return cumulative_integral(self.z)

    @cached_property
    def coupling_residual(self) -> np.ndarray:
        """x(t) - x0 - int_0^t z."""
        return self.x.values - np.asarray(self.spec.x0)[None, :] - self.integral_z.values

    @cached_property
    def terminal_residual(self) -> Dict[int, float]:
        totals = quadrature_components(self.z)
        return {j: self.spec.x0[j - 1] + float(totals[j - 1]) - value for j, value in self.spec.terminal}

    @cached_property
    def env(self) -> Dict[str, np.ndarray]:
        return _node_env(self.x.values, self.u.values)

    @cached_property
    def residuals(self) -> ResidualField:
        spec = self.spec
        N = self.grid.N
        if spec.vector_mode:
            psi, h, unique = sphere_field(spec.vector_model, self.x.values, self.z.values, self.params)
            if not np.all(unique):
                nodes = np.flatnonzero(~unique).tolist()
                _log(f"psi* not unique at nodes {nodes}; using first maximiser")
            return ResidualField(h[:, None], psi, unique)
        h = np.zeros((N, spec.n))
        psi = np.ones((N, spec.n))
        for ch in spec.channels:
            i = ch.index - 1
            psi[:, i], h[:, i] = psi_star(ch, self.x.values, self.z.values[:, i], self.u.values)
        return ResidualField(h, psi, np.ones(N, dtype=bool))

    @cached_property
    def surface_values(self) -> np.ndarray:
        if not self.spec.surface:
            return np.zeros((self.grid.N, 0))
        return np.column_stack([
            np.broadcast_to(e.evaluate(self.env), (self.grid.N,)) for e in self.spec.surface
        ])

    @cached_property
    def cost_density(self) -> np.ndarray:
        total = np.zeros(self.grid.N)
        for term in self.spec.cost:
            total = total + np.max(
                np.column_stack([np.broadcast_to(c.evaluate(self.env), (self.grid.N,)) for c in term]), axis=1
            )
        return total

    @cached_property
    def terms(self) -> MeritTerms:
        return MeritTerms(
            phi=eval_phi(self),
            chi=eval_chi(self),
            omega=eval_omega(self),
            upsilon=eval_upsilon(self),
            cost=quadrature(GridFunction(self.grid, self.cost_density)) if self.spec.has_cost else 0.0,
            penalty=self.spec.penalty,
            has_cost=self.spec.has_cost,
        )

    @cached_property
    def smooth(self) -> "SmoothGradients":
        return smooth_gradient_field(self)

    @property
    def nonunique_count(self) -> int:
        return self.residuals.nonunique_count


def make_state(
    spec: ProblemSpec,
    x: GridFunction,
    z: GridFunction,
    u: Optional[GridFunction] = None,
    params: Optional[SolverParams] = None,
) -> EvalState:
    params = params or spec.params
    if u is None:
        u = GridFunction.zeros(x.grid, spec.nu)
    return EvalState(spec, params, x, z, u)


# ── terms ────────────────────────────────────────────────────────


def eval_upsilon(s: EvalState) -> float:
    r = s.coupling_residual
    return 0.5 * quadrature(GridFunction(s.grid, np.sum(r * r, axis=1)))


def eval_chi(s: EvalState) -> float:
    return 0.5 * sum(v * v for v in s.terminal_residual.values())


def eval_omega(s: EvalState) -> float:
    e = s.surface_values
    if e.shape[1] == 0:
        return 0.0
    return 0.5 * quadrature(GridFunction(s.grid, np.sum(e * e, axis=1)))


def eval_phi(s: EvalState) -> float:
    h = s.residuals.h
    return 0.5 * quadrature(GridFunction(s.grid, np.sum(h * h, axis=1)))


def eval_I(s: EvalState) -> float:
    return s.terms.I


def eval_objective(s: EvalState) -> float:
    return s.terms.objective


def safe_objective(s: EvalState) -> float:
    """Objective, or +inf where an expression leaves its domain."""
    try:
        value = s.terms.objective
    except ExpressionDomainError as exc:
        _log(f"objective undefined at trial point: {exc}")
        return float("inf")
    return value if np.isfinite(value) else float("inf")


# ── smooth gradients ─────────────────────────────────────────────


@dataclass(frozen=True)
class SmoothGradients:
    chi: np.ndarray  # N×n, z-slots
    omega: np.ndarray  # N×n, x-slots
    upsilon: np.ndarray  # N×2n, (x-slots, z-slots)

    def field(self, d: int) -> np.ndarray:
        N, n = self.chi.shape
        out = np.zeros((N, d))
        out[:, :n] += self.omega + self.upsilon[:, :n]
        out[:, n:2 * n] += self.chi + self.upsilon[:, n:]
        return out


def smooth_gradient_field(s: EvalState) -> SmoothGradients:
    spec, grid = s.spec, s.grid
    N, n = grid.N, spec.n

    chi = np.zeros((N, n))
    for j, value in s.terminal_residual.items():
        chi[:, j - 1] = value

    omega = np.zeros((N, n))
    if spec.surface:
        e = s.surface_values
        for j, expr in enumerate(spec.surface):
            grads = expr.gradient(spec.x_names)
            for k, g in enumerate(grads):
                omega[:, k] += e[:, j] * np.broadcast_to(g.evaluate(s.env), (N,))

    r = s.coupling_residual
    w = grid.weights
    z_part = -tail_integral_adjoint(grid, w[:, None] * r) / w[:, None]
    upsilon = np.hstack([r, z_part])
    return SmoothGradients(chi, omega, upsilon)


def smooth_gradients(s: EvalState, t_k: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise (grad_chi on z, grad_omega on x, grad_upsilon on (x, z)) at node ``t_k``."""
    field = s.smooth
    return field.chi[t_k].copy(), field.omega[t_k].copy(), field.upsilon[t_k].copy()


def h_field(s: EvalState) -> np.ndarray:
    return s.residuals.h
