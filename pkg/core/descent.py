from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from scipy.linalg import orth
from scipy.optimize import minimize_scalar

from QDSolve.config.config import SETTINGS
from QDSolve.core.errors import CombinationLimitError, ExpressionDomainError, NumericalFailure
from QDSolve.core.expr import Expression
from QDSolve.core.functional import EvalState, safe_objective
from QDSolve.core.geometry import node_direction
from QDSolve.core.logger import _log, log_block
from QDSolve.core.models import IterationRecord, ProblemSpec, SolveResult, SolverParams
from QDSolve.core.problem import switching_surfaces
from QDSolve.core.quasidiff import assemble_pointwise
from QDSolve.core.trajectory import GridFunction, TimeGrid, interpolate_directions

console = Console()

_TAIL_STEPS = 20
_MEASURE_STEP = 1e-6
_CLEAN_TOL = 1e-14

# node index -> normals of the directions removed from its search space
Constraints = Dict[int, List[np.ndarray]]


def projector(normals: Sequence[np.ndarray], d: int) -> np.ndarray:
    """Orthogonal projector onto the complement of ``normals``."""
    basis = orth(np.asarray(normals, dtype=float).reshape(-1, d).T)
    P = np.eye(d) - basis @ basis.T
    P[np.abs(P) < _CLEAN_TOL] = 0.0
    return P


def merge_constraints(*parts: Constraints) -> Constraints:
    out: Constraints = {}
    for part in parts:
        for k, normals in part.items():
            out.setdefault(k, []).extend(normals)
    return out


def initial_constraints(spec: ProblemSpec, params: Optional[SolverParams] = None) -> Constraints:
    """With ``fix_initial`` the node-0 state slots leave the search space."""
    params = params or spec.params
    if not params.fix_initial:
        return {}
    return {0: [np.eye(spec.d)[j] for j in range(spec.n)]}


def switching_constraints(
    s: EvalState,
    params: Optional[SolverParams] = None,
    surfaces: Optional[Sequence[Expression]] = None,
) -> Constraints:
    """Normals of the sign switches that nodes sit on (``|arg| <= delta``)."""
    params = params or s.params
    spec = s.spec
    surfaces = switching_surfaces(spec) if surfaces is None else surfaces
    N, n = s.grid.N, spec.n
    names = list(spec.x_names) + list(spec.u_names)
    found: Constraints = {}
    for arg in surfaces:
        values = np.broadcast_to(arg.evaluate(s.env), (N,))
        near = np.flatnonzero(np.abs(values) <= params.delta)
        if near.size == 0:
            continue
        grads = np.column_stack([np.broadcast_to(g.evaluate(s.env), (N,)) for g in arg.gradient(names)])
        for k in near:
            normal = np.zeros(spec.d)
            normal[:n] = grads[k, :n]
            normal[2 * n:] = grads[k, n:]
            if np.any(normal):
                found.setdefault(int(k), []).append(normal)
    return found


def _node(s: EvalState, k: int, params: SolverParams, P: Optional[np.ndarray] = None) -> Tuple[np.ndarray, float]:
    try:
        pair = assemble_pointwise(s, k, params)
        if P is not None:
            pair = pair.projected(P)
        return node_direction(pair, node=k)
    except NumericalFailure as exc:
        if exc.node is not None:
            raise
        raise NumericalFailure(exc.message, node=k, diagnostics=exc.diagnostics) from exc


def node_directions(
    s: EvalState,
    params: Optional[SolverParams] = None,
    constraints: Optional[Constraints] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-node directions (N×d) and deviations (N,).

    A node listed in ``constraints`` has its pair projected onto the
    complement of the given normals before the direction is computed.
    """
    params = params or s.params
    N = s.grid.N
    projectors = {k: projector(normals, s.spec.d) for k, normals in (constraints or {}).items()}
    # shared caches are filled once before worker threads read them
    s.residuals, s.smooth, s.env
    if params.workers > 1 and N > 1:
        with ThreadPoolExecutor(max_workers=params.workers) as pool:
            results = list(pool.map(lambda k: _node(s, k, params, projectors.get(k)), range(N)))
    else:
        results = [_node(s, k, params, projectors.get(k)) for k in range(N)]
    G = np.array([g for g, _ in results]).reshape(N, s.spec.d)
    deviations = np.array([dev for _, dev in results])
    return G, deviations


def direction_field(
    s: EvalState,
    params: Optional[SolverParams] = None,
    constraints: Optional[Constraints] = None,
) -> Tuple[GridFunction, float]:
    G, deviations = node_directions(s, params, constraints)
    samples = list(zip(s.grid.nodes, G))
    return interpolate_directions(samples, s.grid), float(np.max(deviations))


def stationarity_check(max_deviation: float, params: Optional[SolverParams] = None) -> bool:
    params = params or SolverParams()
    return max_deviation <= params.eps


def scan_and_refine(phi: Callable[[float], float], f0: float, gamma_max: float, samples: int) -> float:
    """Minimise ``phi`` on [0, gamma_max]: coarse scan, then golden section.

    Returns 0 unless some trial strictly improves on ``f0``.
    """
    uniform = np.linspace(0.0, gamma_max, samples)
    tail = gamma_max / (samples - 1) * 2.0 ** -np.arange(1, _TAIL_STEPS + 1)
    gammas = np.unique(np.concatenate([uniform, tail]))
    values = np.array([f0] + [phi(float(g)) for g in gammas[1:]])
    j = int(np.argmin(values))
    if not values[j] < f0:
        return 0.0
    if j == gammas.size - 1:
        return float(gammas[j])
    best_gamma, best_value = float(gammas[j]), float(values[j])
    try:
        res = minimize_scalar(
            phi,
            bracket=(float(gammas[j - 1]), best_gamma, float(gammas[j + 1])),
            method="golden",
            tol=1e-6,
        )
    except ValueError as exc:
        _log(f"line search refinement skipped: {exc}")
        return best_gamma
    if 0.0 <= res.x <= gamma_max and res.fun < best_value:
        return float(res.x)
    return best_gamma


def line_search(s: EvalState, G: GridFunction, params: Optional[SolverParams] = None) -> float:
    params = params or s.params
    if not np.any(G.values):
        return 0.0
    f0 = s.terms.objective
    return scan_and_refine(lambda g: safe_objective(s.step(g, G)), f0, params.gamma_max, params.ls_samples)


def stationarity_measure(s: EvalState, G: GridFunction, step: float = _MEASURE_STEP) -> float:
    """Forward-difference derivative of the objective along G / ||G||."""
    norm = G.l2_norm()
    if norm == 0.0:
        return 0.0
    f0 = s.terms.objective
    return (safe_objective(s.step(step / norm, G)) - f0) / step


def initial_state(spec: ProblemSpec, grid: TimeGrid, params: Optional[SolverParams] = None) -> EvalState:
    """x = x0, z = 0, u = 0 unless the problem file gives expressions in t."""
    params = params or spec.params
    N = grid.N
    env = {"t": grid.nodes}

    def _columns(exprs, fallback: np.ndarray) -> np.ndarray:
        if exprs is None:
            return fallback
        return np.column_stack([np.broadcast_to(e.evaluate(env), (N,)) for e in exprs]).reshape(N, -1)

    guess = spec.initial
    x = _columns(guess.x if guess else None, np.repeat(np.asarray(spec.x0, dtype=float)[None, :], N, axis=0))
    z = _columns(guess.z if guess else None, np.zeros((N, spec.n)))
    u = _columns(guess.u if guess else None, np.zeros((N, spec.nu)))
    decision = np.hstack([x, z, u])
    if params.jitter > 0:
        rng = np.random.default_rng(params.seed)
        decision = decision + rng.normal(scale=params.jitter, size=decision.shape)
    state = EvalState.from_decision(spec, params, grid, decision)
    return anchor_initial_point(state) if params.fix_initial else state


def anchor_initial_point(s: EvalState) -> EvalState:
    """Copy of ``s`` with x(0) = x0."""
    x = np.array(s.x.values)
    x[0] = s.spec.x0
    return EvalState(s.spec, s.params, s.x.with_values(x), s.z, s.u)


def _record(k: int, s: EvalState, deviation: float, gamma: float, measure: float) -> IterationRecord:
    t = s.terms
    return IterationRecord(
        k=k,
        objective=t.objective,
        phi=t.phi,
        chi=t.chi,
        omega=t.omega,
        upsilon=t.upsilon,
        cost=t.cost,
        deviation=deviation,
        gamma=gamma,
        measure=measure,
        nonunique=s.nonunique_count,
    )


def _stationary_status(s: EvalState) -> str:
    return "solution" if s.terms.objective <= SETTINGS.certificate_tolerance else "stationary"


def solve(
    spec: ProblemSpec,
    initial: Optional[EvalState] = None,
    params: Optional[SolverParams] = None,
    on_iteration: Optional[Callable[[IterationRecord, EvalState], None]] = None,
    verbose: Optional[bool] = None,
) -> SolveResult:
    params = params or (initial.params if initial is not None else spec.params)
    verbose = SETTINGS.verbose if verbose is None else verbose
    grid = initial.grid if initial is not None else TimeGrid(spec.T, params.n_grid)
    state = initial if initial is not None else initial_state(spec, grid, params)
    if state.params != params:
        state = EvalState(spec, params, state.x, state.z, state.u)
    if params.fix_initial:
        state = anchor_initial_point(state)
    anchor = initial_constraints(spec, params)
    surfaces = switching_surfaces(spec)

    log_block(f"solve {spec.name} (N={grid.N}, lambda={spec.penalty:g})", params.model_dump())
    history: List[IterationRecord] = []
    status = "max_iter"
    started = time.perf_counter()

    for k in range(1, params.max_iter + 1):
        try:
            G, deviation = direction_field(state, params, anchor)
            measure = stationarity_measure(state, G)
            gamma = 0.0
            if stationarity_check(deviation, params):
                status = _stationary_status(state)
            else:
                gamma = line_search(state, G, params)
                held = switching_constraints(state, params, surfaces) if gamma == 0.0 else {}
                if held:
                    _log(f"iter {k}: line search failed, holding nodes {sorted(held)} on their sign switches")
                    G, deviation = direction_field(state, params, merge_constraints(anchor, held))
                    measure = stationarity_measure(state, G)
                    if stationarity_check(deviation, params):
                        status = _stationary_status(state)
                    else:
                        gamma = line_search(state, G, params)
                if gamma == 0.0 and status == "max_iter":
                    status = "stalled"
        except (ExpressionDomainError, NumericalFailure) as exc:
            _log(f"solve {spec.name} failed at iteration {k}: {exc}")
            raise NumericalFailure(
                getattr(exc, "message", str(exc)),
                iteration=k,
                node=getattr(exc, "node", None),
                diagnostics=getattr(exc, "diagnostics", None),
            ) from exc
        except CombinationLimitError as exc:
            _log(f"solve {spec.name} failed at iteration {k}: {exc}")
            raise

        record = _record(k, state, deviation, gamma, measure)
        history.append(record)
        _log(
            f"iter {k}: objective={record.objective:.6e} deviation={deviation:.3e} "
            f"gamma={gamma:.3e} measure={measure:.3e} nonunique={record.nonunique}"
        )
        if verbose:
            console.print(
                f"[bold]Iteration {k}/{params.max_iter}[/bold] "
                f"objective={record.objective:.6e} deviation={deviation:.3e} gamma={gamma:.3e}"
            )
        if on_iteration is not None:
            on_iteration(record, state)

        if status != "max_iter":
            break
        state = state.step(gamma, G)

    elapsed = time.perf_counter() - started
    result = SolveResult(final=state, history=history, status=status, elapsed=elapsed)
    _log(f"solve {spec.name} finished: status={status} iterations={result.iterations} elapsed={elapsed:.2f}s")
    if verbose:
        colour = "green" if result.converged else "yellow"
        console.print(f"[bold {colour}]{spec.name}: {status} after {result.iterations} iteration(s)[/bold {colour}]")
    return result
