from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from typing import Any, Dict, List, Optional

import numpy as np
from rich.console import Console
from rich.table import Table

from QDSolve.config.config import SETTINGS
from QDSolve.core.descent import initial_constraints, node_directions, solve
from QDSolve.core.errors import ProblemFormatError
from QDSolve.core.functional import EvalState
from QDSolve.core.logger import run_log
from QDSolve.core.models import ProblemSpec, SolveResult
from QDSolve.core.problem import builtin_examples, describe_problem, resolve_problem
from QDSolve.core.quasidiff import assemble_pointwise
from QDSolve.core.shared.postprocess import load_state_csv, save_history, save_summary, save_trajectory

console = Console()

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2


def boundary_errors(s: EvalState) -> Dict[str, float]:
    spec = s.spec
    errors = {"x(0)": float(np.max(np.abs(s.x.values[0] - np.asarray(spec.x0))))}
    for j, value in spec.terminal:
        errors[f"x{j}(T)"] = float(abs(s.x.values[-1, j - 1] - value))
    return errors


def state_summary(s: EvalState) -> Dict[str, Any]:
    terms = s.terms
    bounds = boundary_errors(s)
    return {
        "objective": terms.objective,
        "I": terms.I,
        "phi": terms.phi,
        "chi": terms.chi,
        "omega": terms.omega,
        "upsilon": terms.upsilon,
        "cost": terms.cost,
        "boundary_errors": bounds,
        "max_boundary_error": max(bounds.values()),
        "max_h": float(np.max(s.residuals.h)),
        "nonunique": s.nonunique_count,
    }


def solve_summary(spec: ProblemSpec, result: SolveResult) -> Dict[str, Any]:
    summary: Dict[str, Any] = {"problem": spec.name}
    summary.update(result.summary())
    summary.update(state_summary(result.final))
    return summary


def _print_summary(summary: Dict[str, Any]) -> None:
    table = Table(title=f"{summary['problem']}: {summary['status']}")
    table.add_column("quantity")
    table.add_column("value", justify="right")
    for key in ("iterations", "objective", "I", "phi", "chi", "omega", "upsilon", "cost",
                "max_boundary_error", "max_h", "last_deviation", "nonunique", "elapsed_seconds"):
        value = summary.get(key)
        table.add_row(key, f"{value:.6g}" if isinstance(value, float) else str(value))
    console.print(table)


def cmd_solve(args: argparse.Namespace) -> int:
    spec = resolve_problem(args.problem)
    params = spec.params.with_overrides(
        n_grid=args.n_grid,
        delta=args.delta,
        eps=args.eps,
        gamma_max=args.gamma_max,
        max_iter=args.max_iter,
        seed=args.seed,
        workers=args.workers,
        fix_initial=args.fix_initial,
    )
    if args.lam is not None:
        if not args.lam > 0:
            raise ProblemFormatError("penalty", f"--lambda must be positive, got {args.lam}")
        spec = dataclasses.replace(spec, penalty=float(args.lam))

    verbose = SETTINGS.verbose and not args.quiet
    out_dir = args.out or os.path.join(SETTINGS.output_dir, f"{spec.name}_{time.strftime('%Y%m%d_%H%M%S')}")
    with run_log(os.path.join(out_dir, "solve.log")):
        result = solve(spec, params=params, verbose=verbose)

    summary = solve_summary(spec, result)
    save_trajectory(result.final, out_dir)
    save_history(result.history, out_dir)
    save_summary(summary, out_dir)
    if not args.quiet:
        _print_summary(summary)
        console.print(f"Saved trajectory, history and summary to: {out_dir}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_check(args: argparse.Namespace) -> int:
    spec = resolve_problem(args.problem)
    state = load_state_csv(args.state, spec)
    params = state.params.with_overrides(eps=args.eps, delta=args.delta)
    state = EvalState(spec, params, state.x, state.z, state.u)
    tol = SETTINGS.check_tolerance if args.tol is None else args.tol

    h = state.residuals.h
    surface = np.abs(state.surface_values)
    _, deviations = node_directions(state, params, initial_constraints(spec, params))
    terms = state.terms

    table = Table(title=f"check {spec.name} ({args.state})")
    table.add_column("node", justify="right")
    table.add_column("t", justify="right")
    for j in range(h.shape[1]):
        table.add_column("h" if spec.vector_mode else f"h{j + 1}", justify="right")
    if surface.shape[1]:
        table.add_column("|e|", justify="right")
    table.add_column("deviation", justify="right")
    for k, t in enumerate(state.grid.nodes):
        row = [str(k), f"{t:.4g}"] + [f"{v:.3e}" for v in h[k]]
        if surface.shape[1]:
            row.append(f"{np.max(surface[k]):.3e}")
        row.append(f"{deviations[k]:.3e}")
        table.add_row(*row)
    console.print(table)

    checks = {
        "max h": float(np.max(h)) <= tol,
        "surface": (float(np.max(surface)) if surface.size else 0.0) <= tol,
        "upsilon": terms.upsilon <= tol,
        "chi": terms.chi <= tol,
        "stationarity": float(np.max(deviations)) <= params.eps,
    }
    console.print(f"upsilon={terms.upsilon:.3e} chi={terms.chi:.3e} objective={terms.objective:.3e}")
    for name, ok in checks.items():
        console.print(f"{'[green]OK' if ok else '[red]FAIL'}[/] {name}")

    if args.dump_node is not None:
        if not 0 <= args.dump_node < state.grid.N:
            raise ValueError(f"--dump-node must lie in 0..{state.grid.N - 1}")
        pair = assemble_pointwise(state, args.dump_node, params)
        console.print_json(json.dumps(pair.dump()))

    return EXIT_OK if all(checks.values()) else EXIT_NOT_CONVERGED


def cmd_examples(args: argparse.Namespace) -> int:
    specs = [spec for spec in builtin_examples() if not args.filter or args.filter in spec.name]
    if not specs:
        print(f"unknown example: {args.filter}", file=sys.stderr)
        return EXIT_ERROR
    table = Table(title="Built-in examples")
    table.add_column("name")
    table.add_column("reference")
    table.add_column("description")
    for spec in specs:
        table.add_row(spec.name, spec.reference or "-", describe_problem(spec))
    console.print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qdsolve",
        description="Solve boundary-value problems for differential inclusions by quasidifferential descent",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="求解问题文件或内置示例")
    p_solve.add_argument("problem", help="问题文件路径（JSON）或内置示例名")
    p_solve.add_argument("--n-grid", type=int, default=None, help="网格节点数（默认读取配置 QDS_N_GRID=11）")
    p_solve.add_argument("--delta", type=float, default=None, help="δ-活跃集阈值（默认 1e-3）")
    p_solve.add_argument("--eps", type=float, default=None, help="平稳性容差 ε（默认 1e-2）")
    p_solve.add_argument("--gamma-max", type=float, default=None, help="线搜索区间上界 γ̄（默认 1）")
    p_solve.add_argument("--lambda", dest="lam", type=float, default=None, help="罚因子 λ，覆盖问题文件中的 penalty")
    p_solve.add_argument("--max-iter", type=int, default=None, help="最大迭代次数（默认 500）")
    p_solve.add_argument("--seed", type=int, default=None, help="初值扰动的随机种子")
    p_solve.add_argument("--workers", type=int, default=None, help="节点并行线程数（默认 1）")
    p_solve.add_argument(
        "--fix-initial", action="store_true", default=None, help="固定 x(0) = x0，节点 0 的状态分量不参与下降"
    )
    p_solve.add_argument("--out", default=None, help="输出目录，缺省时写入 QDS_OUTPUT_DIR 下带时间戳的子目录")
    p_solve.add_argument("--quiet", action="store_true", help="不打印迭代进度与摘要")
    p_solve.set_defaults(func=cmd_solve)

    p_check = sub.add_parser("check", help="检查给定轨迹文件的残差与平稳性")
    p_check.add_argument("problem", help="问题文件路径或内置示例名")
    p_check.add_argument("--state", required=True, help="trajectory.csv 路径")
    p_check.add_argument("--tol", type=float, default=None, help="残差容差（默认读取配置 QDS_CHECK_TOL）")
    p_check.add_argument("--eps", type=float, default=None, help="平稳性容差 ε")
    p_check.add_argument("--delta", type=float, default=None, help="δ-活跃集阈值")
    p_check.add_argument("--dump-node", type=int, default=None, help="打印该节点的拟微分对 (A, B)")
    p_check.set_defaults(func=cmd_check)

    p_examples = sub.add_parser("examples", help="列出内置示例")
    p_examples.add_argument("filter", nargs="?", default=None, help="按名称子串过滤")
    p_examples.set_defaults(func=cmd_examples)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        message = str(exc)
        if not message.startswith("file not found"):
            message = f"file not found: {exc.filename or message}"
        print(message, file=sys.stderr)
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
