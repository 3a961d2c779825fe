"""Pointwise quasidifferentials (A, B) of the merit integrand.

Polytopes are kept as ``base + sum of co(generator set)``; the geometry module
consumes the enumerated point cloud, never an explicit hull.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from QDSolve.config.config import SETTINGS
from QDSolve.core.errors import CombinationLimitError, ExpressionDomainError
from QDSolve.core.expr import Expression
from QDSolve.core.functional import EvalState, _node_env
from QDSolve.core.models import Channel, SolverParams, SupportModel
from QDSolve.core.problem import support_env

_DEDUP_TOL = 1e-12


@dataclass(frozen=True)
class GeneratorPolytope:
    base: np.ndarray
    generators: Tuple[np.ndarray, ...] = field(default_factory=tuple)

    @property
    def dimension(self) -> int:
        return int(self.base.shape[0])

    @classmethod
    def zero(cls, d: int) -> "GeneratorPolytope":
        return cls(np.zeros(d), ())

    @classmethod
    def point(cls, p: Sequence[float]) -> "GeneratorPolytope":
        return cls(np.asarray(p, dtype=float).copy(), ())

    @classmethod
    def build(cls, base: Sequence[float], sets: Iterable[Sequence[Sequence[float]]] = ()) -> "GeneratorPolytope":
        """Deduplicate each set; singleton sets fold into the base."""
        base = np.asarray(base, dtype=float).copy()
        d = base.shape[0]
        kept: List[np.ndarray] = []
        for raw in sets:
            pts = np.asarray(raw, dtype=float).reshape(-1, d)
            if pts.shape[0] == 0:
                continue
            unique: List[np.ndarray] = []
            for p in pts:
                if not any(np.max(np.abs(p - q)) <= _DEDUP_TOL for q in unique):
                    unique.append(p)
            if len(unique) == 1:
                base = base + unique[0]
            else:
                kept.append(np.array(unique))
        return cls(base, tuple(kept))

    def scaled(self, c: float) -> "GeneratorPolytope":
        return GeneratorPolytope(c * self.base, tuple(c * g for g in self.generators))

    def __neg__(self) -> "GeneratorPolytope":
        return self.scaled(-1.0)

    def __add__(self, other: "GeneratorPolytope") -> "GeneratorPolytope":
        if other.dimension != self.dimension:
            raise ValueError(f"dimension mismatch: {self.dimension} vs {other.dimension}")
        return GeneratorPolytope(self.base + other.base, self.generators + other.generators)

    @property
    def combination_count(self) -> int:
        count = 1
        for g in self.generators:
            count *= g.shape[0]
        return count

    def enumerate_points(self, limit: Optional[int] = None, node: Optional[int] = None) -> np.ndarray:
        """Base plus one point of every generator set, in product order."""
        limit = SETTINGS.max_combinations if limit is None else limit
        count = self.combination_count
        if count > limit:
            raise CombinationLimitError(count, limit, node)
        points = self.base[None, :]
        for g in self.generators:
            points = (points[:, None, :] + g[None, :, :]).reshape(-1, self.dimension)
        return points

    def support(self, g: np.ndarray) -> float:
        """max over the set of <v, g>."""
        g = np.asarray(g, dtype=float)
        return float(self.base @ g + sum(np.max(s @ g) for s in self.generators))

    def projected(self, P: np.ndarray) -> "GeneratorPolytope":
        """Image under the symmetric projector ``P``; collapsed sets fold into the base."""
        return GeneratorPolytope.build(P @ self.base, [g @ P for g in self.generators])

    def dump(self) -> Dict[str, Any]:
        return {
            "dimension": self.dimension,
            "base": self.base.tolist(),
            "generators": [s.tolist() for s in self.generators],
        }


@dataclass(frozen=True)
class QuasiDiffPair:
    A: GeneratorPolytope
    B: GeneratorPolytope

    def __post_init__(self) -> None:
        if self.A.dimension != self.B.dimension:
            raise ValueError("A and B must share a dimension")

    def projected(self, P: np.ndarray) -> "QuasiDiffPair":
        return QuasiDiffPair(self.A.projected(P), self.B.projected(P))

    def dump(self) -> Dict[str, Any]:
        return {"A": self.A.dump(), "B": self.B.dump()}


def directional_derivative(pair: QuasiDiffPair, g: np.ndarray) -> float:
    """max over A of <v, g> + min over B of <w, g>."""
    return pair.A.support(g) - pair.B.support(-np.asarray(g, dtype=float))


# ── δ-active sets ────────────────────────────────────────────────


def delta_active_max(values: Sequence[float], delta: float) -> List[int]:
    vals = np.asarray(values, dtype=float)
    return np.flatnonzero(vals >= np.max(vals) - delta).tolist()


def delta_active_min(values: Sequence[float], delta: float) -> List[int]:
    vals = np.asarray(values, dtype=float)
    return np.flatnonzero(vals <= np.min(vals) + delta).tolist()


# ── ½h² pieces ───────────────────────────────────────────────────


def _embed_x(vectors: np.ndarray, d: int) -> np.ndarray:
    out = np.zeros((vectors.shape[0], d))
    out[:, :vectors.shape[1]] = vectors
    return out


def _grad_at(e: Expression, names: Sequence[str], env: Dict[str, Any]) -> np.ndarray:
    return np.array([float(np.asarray(g.evaluate(env))) for g in e.gradient(names)])


def _x_names(n: int) -> Tuple[str, ...]:
    return tuple(f"x{k}" for k in range(1, n + 1))


def _branch_sets(
    model: SupportModel,
    x_t: np.ndarray,
    psi: Any,
    h: float,
    delta: float,
    d: int,
    use_max: bool,
) -> List[np.ndarray]:
    n = x_t.shape[0]
    names = _x_names(n)
    env = support_env(model, x_t, psi)
    factor = 1.0 if model.vector else float(psi)
    sets: List[np.ndarray] = []
    terms = model.max_terms if use_max else model.min_terms
    for term in terms:
        if use_max:
            values = [float(f.evaluate(env)) * factor for f in term]
            active = delta_active_max(values, delta)
            grads = np.array([-h * factor * _grad_at(term[q], names, env) for q in active])
        else:
            values = [float(g.evaluate(env)) for g in term]
            active = delta_active_min(values, delta)
            grads = np.array([-h * _grad_at(term[p], names, env) for p in active])
        sets.append(_embed_x(grads, d))
    return sets


def superdiff_h2(
    channel: Channel, x_t: np.ndarray, z_t_i: float, psi_star: float, h: float, delta: float, *, nu: int = 0
) -> GeneratorPolytope:
    x_t = np.asarray(x_t, dtype=float)
    n = x_t.shape[0]
    d = 2 * n + nu
    if h <= 0:
        return GeneratorPolytope.zero(d)
    base = np.zeros(d)
    base[n + channel.index - 1] = h * psi_star
    return GeneratorPolytope.build(base, _branch_sets(channel.model, x_t, psi_star, h, delta, d, use_max=True))


def subdiff_h2(
    channel: Channel, x_t: np.ndarray, z_t_i: float, psi_star: float, h: float, delta: float, *, nu: int = 0
) -> GeneratorPolytope:
    x_t = np.asarray(x_t, dtype=float)
    d = 2 * x_t.shape[0] + nu
    if h <= 0 or not channel.model.min_terms:
        return GeneratorPolytope.zero(d)
    return GeneratorPolytope.build(np.zeros(d), _branch_sets(channel.model, x_t, psi_star, h, delta, d, use_max=False))


def superdiff_h2_vector(
    model: SupportModel, x_t: np.ndarray, z_t: np.ndarray, psi_star: np.ndarray, h: float, delta: float, *, nu: int = 0
) -> GeneratorPolytope:
    x_t = np.asarray(x_t, dtype=float)
    n = x_t.shape[0]
    d = 2 * n + nu
    if h <= 0:
        return GeneratorPolytope.zero(d)
    base = np.zeros(d)
    base[n:2 * n] = h * np.asarray(psi_star, dtype=float)
    return GeneratorPolytope.build(base, _branch_sets(model, x_t, np.asarray(psi_star), h, delta, d, use_max=True))


def subdiff_h2_vector(
    model: SupportModel, x_t: np.ndarray, z_t: np.ndarray, psi_star: np.ndarray, h: float, delta: float, *, nu: int = 0
) -> GeneratorPolytope:
    x_t = np.asarray(x_t, dtype=float)
    d = 2 * x_t.shape[0] + nu
    if h <= 0 or not model.min_terms:
        return GeneratorPolytope.zero(d)
    return GeneratorPolytope.build(np.zeros(d), _branch_sets(model, x_t, np.asarray(psi_star), h, delta, d, use_max=False))


def equation_gradient(channel: Channel, x_t: np.ndarray, z_t_i: float, u_t: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of ½(z_i - rhs(x, u))² in the (x, z, u) slots."""
    x_t = np.asarray(x_t, dtype=float)
    u_t = np.zeros(0) if u_t is None else np.asarray(u_t, dtype=float)
    n, nu = x_t.shape[0], u_t.shape[0]
    env = _node_env(x_t, u_t)
    residual = float(z_t_i) - float(channel.rhs.evaluate(env))
    out = np.zeros(2 * n + nu)
    out[n + channel.index - 1] = residual
    names = _x_names(n) + tuple(f"u{k}" for k in range(1, nu + 1))
    grad = _grad_at(channel.rhs, names, env)
    out[:n] -= residual * grad[:n]
    out[2 * n:] -= residual * grad[n:]
    return out


def subdiff_cost(
    term: Sequence[Expression], x_t: np.ndarray, delta: float, u_t: Optional[np.ndarray] = None
) -> GeneratorPolytope:
    """Subdifferential of max_q c_q(x, u): gradients of the δ-active branches."""
    x_t = np.asarray(x_t, dtype=float)
    u_t = np.zeros(0) if u_t is None else np.asarray(u_t, dtype=float)
    n, nu = x_t.shape[0], u_t.shape[0]
    env = _node_env(x_t, u_t)
    names = _x_names(n) + tuple(f"u{k}" for k in range(1, nu + 1))
    values = [float(c.evaluate(env)) for c in term]
    active = delta_active_max(values, delta)
    pts = np.zeros((len(active), 2 * n + nu))
    for row, q in enumerate(active):
        grad = _grad_at(term[q], names, env)
        pts[row, :n] = grad[:n]
        pts[row, 2 * n:] = grad[n:]
    return GeneratorPolytope.build(np.zeros(2 * n + nu), [pts])


# ── assembly ─────────────────────────────────────────────────────


def assemble_pointwise(s: EvalState, t_k: int, params: Optional[SolverParams] = None) -> QuasiDiffPair:
    params = params or s.params
    try:
        return _assemble(s, t_k, params.delta)
    except ExpressionDomainError as exc:
        raise exc.at_node(t_k) from exc


def _assemble(s: EvalState, t_k: int, delta: float) -> QuasiDiffPair:
    spec = s.spec
    n, d = spec.n, spec.d
    x_t = s.x.values[t_k]
    z_t = s.z.values[t_k]
    u_t = s.u.values[t_k]
    res = s.residuals

    smooth = s.smooth
    base = np.zeros(d)
    base[:n] += smooth.omega[t_k] + smooth.upsilon[t_k, :n]
    base[n:2 * n] += smooth.chi[t_k] + smooth.upsilon[t_k, n:]

    A = GeneratorPolytope.point(base)
    B = GeneratorPolytope.zero(d)
    if spec.vector_mode:
        h = float(res.h[t_k, 0])
        psi = res.psi[t_k]
        A = A + subdiff_h2_vector(spec.vector_model, x_t, z_t, psi, h, delta, nu=spec.nu)
        B = B + superdiff_h2_vector(spec.vector_model, x_t, z_t, psi, h, delta, nu=spec.nu)
    else:
        for ch in spec.channels:
            i = ch.index - 1
            if ch.is_equation:
                A = A + GeneratorPolytope.point(equation_gradient(ch, x_t, z_t[i], u_t))
                continue
            h = float(res.h[t_k, i])
            psi = float(res.psi[t_k, i])
            A = A + subdiff_h2(ch, x_t, z_t[i], psi, h, delta, nu=spec.nu)
            B = B + superdiff_h2(ch, x_t, z_t[i], psi, h, delta, nu=spec.nu)

    if spec.has_cost:
        A = A.scaled(spec.penalty)
        B = B.scaled(spec.penalty)
        for term in spec.cost:
            A = A + subdiff_cost(term, x_t, delta, u_t)
    return QuasiDiffPair(A, B)
