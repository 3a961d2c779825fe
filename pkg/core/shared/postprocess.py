from __future__ import annotations

import json
import os
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from QDSolve.config.config import SETTINGS
from QDSolve.core.errors import ProblemFormatError
from QDSolve.core.functional import EvalState
from QDSolve.core.logger import _log
from QDSolve.core.models import HISTORY_COLUMNS, IterationRecord, ProblemSpec, SolverParams
from QDSolve.core.trajectory import TimeGrid, to_csv_rows


def _fmt() -> str:
    return f"%.{SETTINGS.csv_digits}g"


def residual_columns(spec: ProblemSpec) -> List[str]:
    if spec.vector_mode:
        return ["h"]
    return [f"h{k}" for k in range(1, spec.n + 1)]


def trajectory_table(s: EvalState) -> np.ndarray:
    h = s.residuals.h
    columns = [s.decision[:, j] for j in range(s.decision.shape[1])]
    columns += [h[:, j] for j in range(h.shape[1])]
    return to_csv_rows(s.grid, columns)


def save_trajectory(s: EvalState, output_dir: str, filename: str = "trajectory.csv") -> str:
    """t, x, z, u and the per-node residuals h, one row per grid node."""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, filename)
    header = ",".join(["t"] + s.spec.column_names + residual_columns(s.spec))
    np.savetxt(path, trajectory_table(s), fmt=_fmt(), delimiter=",", header=header, comments="")
    _log(f"trajectory saved to {path}")
    return path


def save_history(history: Sequence[IterationRecord], output_dir: str, filename: str = "history.csv") -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, filename)
    rows = np.array([rec.as_row() for rec in history], dtype=float).reshape(-1, len(HISTORY_COLUMNS))
    fmt = ["%d"] + [_fmt()] * (len(HISTORY_COLUMNS) - 2) + ["%d"]
    np.savetxt(path, rows, fmt=fmt, delimiter=",", header=",".join(HISTORY_COLUMNS), comments="")
    _log(f"history saved to {path}")
    return path


def save_summary(summary: Dict[str, Any], output_dir: str, filename: str = "summary.json") -> str:
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, filename)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, ensure_ascii=False)
    _log(f"summary saved to {path}")
    return path


def load_state_csv(path: str, spec: ProblemSpec, params: Optional[SolverParams] = None) -> EvalState:
    """Rebuild an EvalState from a trajectory file written by :func:`save_trajectory`.

    Extra columns (residuals) are ignored; the grid is inferred from the t column.
    """
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    names = [name.strip() for name in header.split(",")]
    required = ["t"] + spec.column_names
    missing = [name for name in required if name not in names]
    if missing:
        raise ProblemFormatError("state", f"missing columns {missing} in {path}")
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise ProblemFormatError("state", f"malformed numeric data in {path}: {exc}") from exc
    if table.shape[1] != len(names):
        raise ProblemFormatError("state", f"expected {len(names)} columns, found {table.shape[1]}")
    if not np.all(np.isfinite(table)):
        raise ProblemFormatError("state", "non-finite values")

    t = table[:, names.index("t")]
    N = t.size
    if N < 2:
        raise ProblemFormatError("state", "at least two grid nodes are required")
    if abs(t[0]) > 1e-9 or abs(t[-1] - spec.T) > 1e-9 * max(1.0, spec.T):
        raise ProblemFormatError("state", f"t must run from 0 to T={spec.T}")
    grid = TimeGrid(spec.T, N)
    if not np.allclose(t, grid.nodes, rtol=0.0, atol=1e-9 * max(1.0, spec.T)):
        raise ProblemFormatError("state", "t column is not a uniform grid")

    decision = np.column_stack([table[:, names.index(name)] for name in spec.column_names]).reshape(N, spec.d)
    params = (params or spec.params).with_overrides(n_grid=N)
    return EvalState.from_decision(spec, params, grid, decision)
