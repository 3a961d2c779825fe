from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from QDSolve.config.config import SETTINGS
from QDSolve.core.expr import Dimensions, Expression

Terms = Tuple[Tuple[Expression, ...], ...]


class SolverParams(BaseModel):
    """Numerical parameters of one solver run (defaults from ``SETTINGS.solver``)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_grid: int = Field(default_factory=lambda: SETTINGS.solver.n_grid, ge=2)
    delta: float = Field(default_factory=lambda: SETTINGS.solver.delta, gt=0)
    eps: float = Field(default_factory=lambda: SETTINGS.solver.eps, gt=0)
    gamma_max: float = Field(default_factory=lambda: SETTINGS.solver.gamma_max, gt=0)
    max_iter: int = Field(default_factory=lambda: SETTINGS.solver.max_iter, ge=1)
    ls_samples: int = Field(default_factory=lambda: SETTINGS.solver.ls_samples, ge=3)
    sphere_samples: int = Field(default_factory=lambda: SETTINGS.solver.sphere_samples, ge=8)
    sphere_grid: Tuple[int, int] = Field(default_factory=lambda: SETTINGS.solver.sphere_grid)
    seed: int = Field(default_factory=lambda: SETTINGS.solver.seed)
    workers: int = Field(default_factory=lambda: SETTINGS.solver.workers, ge=1)
    jitter: float = Field(default=0.0, ge=0)
    fix_initial: bool = False

    def with_overrides(self, **updates: Any) -> "SolverParams":
        """Validated copy; ``None`` values keep the current setting."""
        values = self.model_dump()
        values.update({k: v for k, v in updates.items() if v is not None})
        return SolverParams(**values)


@dataclass(frozen=True)
class SupportModel:
    """Support function as a sum of max-terms and min-terms.

    Per-coordinate mode: ``c(F_i(x), psi) = sum_j max_q f_jq(x)*psi + sum_j min_p g_jp(x, psi)``
    with scalar ``psi = psi<i>``. Vector mode: every entry is an expression in
    ``x`` and ``psi1..psin`` and is taken as written.
    """

    max_terms: Terms = ()
    min_terms: Terms = ()
    vector: bool = False
    coordinate: Optional[int] = None

    def psi_names(self, n: int) -> Tuple[str, ...]:
        if self.vector:
            return tuple(f"psi{k}" for k in range(1, n + 1))
        return (f"psi{self.coordinate}",)

    @property
    def term_count(self) -> int:
        return len(self.max_terms) + len(self.min_terms)


@dataclass(frozen=True)
class Channel:
    index: int
    kind: str
    model: Optional[SupportModel] = None
    rhs: Optional[Expression] = None

    @property
    def is_equation(self) -> bool:
        return self.kind == "equation"


@dataclass(frozen=True)
class InitialGuess:
    x: Optional[Tuple[Expression, ...]] = None
    z: Optional[Tuple[Expression, ...]] = None
    u: Optional[Tuple[Expression, ...]] = None


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    n: int
    nu: int
    T: float
    x0: Tuple[float, ...]
    terminal: Tuple[Tuple[int, float], ...]
    surface: Tuple[Expression, ...]
    channels: Tuple[Channel, ...]
    cost: Terms
    penalty: float
    params: SolverParams
    dims: Dimensions
    vector_model: Optional[SupportModel] = None
    initial: Optional[InitialGuess] = None
    description: str = ""
    reference: str = ""
    source: Optional[str] = None

    @property
    def d(self) -> int:
        return 2 * self.n + self.nu

    @property
    def vector_mode(self) -> bool:
        return self.vector_model is not None

    @property
    def has_cost(self) -> bool:
        return len(self.cost) > 0

    @property
    def x_names(self) -> Tuple[str, ...]:
        return tuple(f"x{k}" for k in range(1, self.n + 1))

    @property
    def u_names(self) -> Tuple[str, ...]:
        return tuple(f"u{k}" for k in range(1, self.nu + 1))

    @property
    def column_names(self) -> List[str]:
        return list(self.x_names) + [f"z{k}" for k in range(1, self.n + 1)] + list(self.u_names)


@dataclass
class IterationRecord:
    k: int
    objective: float
    phi: float
    chi: float
    omega: float
    upsilon: float
    cost: float
    deviation: float
    gamma: float
    measure: float = 0.0
    nonunique: int = 0

    def as_row(self) -> List[float]:
        return [
            self.k, self.objective, self.phi, self.chi, self.omega, self.upsilon,
            self.cost, self.deviation, self.gamma, self.measure, self.nonunique,
        ]


HISTORY_COLUMNS = [
    "k", "objective", "phi", "chi", "omega", "upsilon", "cost", "deviation", "gamma", "measure", "nonunique",
]


@dataclass
class SolveResult:
    final: Any
    history: List[IterationRecord] = field(default_factory=list)
    status: str = "max_iter"
    elapsed: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def converged(self) -> bool:
        return self.status in {"solution", "stationary"}

    def summary(self) -> Dict[str, Any]:
        last = self.history[-1] if self.history else None
        return {
            "status": self.status,
            "iterations": self.iterations,
            "elapsed_seconds": round(self.elapsed, 3),
            "last_deviation": last.deviation if last else None,
        }
