from __future__ import annotations

import os
from typing import Any, Dict, Tuple

from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

# 默认输出根目录（轨迹、迭代历史、摘要）
OUTPUT_ROOT_DEFAULT = os.getenv(
    "QDS_OUTPUT_ROOT",
    os.path.normpath(os.path.join(os.path.dirname(__file__), "..", "output")),
)

# Load .env if present
load_dotenv()

_PROBLEMS_DIR_DEFAULT = os.path.normpath(os.path.join(os.path.dirname(__file__), "..", "problems"))
_LOG_DIR_DEFAULT = os.path.normpath(os.path.join(os.path.dirname(__file__), "..", "logs"))


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() not in {"0", "false", "no"}


def _parse_grid_shape(text: str) -> Tuple[int, int]:
    """"64x128" -> (64, 128)."""
    parts = text.lower().replace("*", "x").split("x")
    if len(parts) != 2:
        raise ValueError(f"Invalid sphere grid: {text}")
    return int(parts[0]), int(parts[1])


class SolverSettings(BaseModel):
    n_grid: int = Field(default=int(os.getenv("QDS_N_GRID", "11")))
    delta: float = Field(default=float(os.getenv("QDS_DELTA", "1e-3")))
    eps: float = Field(default=float(os.getenv("QDS_EPS", "1e-2")))
    gamma_max: float = Field(default=float(os.getenv("QDS_GAMMA_MAX", "1.0")))
    penalty: float = Field(default=float(os.getenv("QDS_PENALTY", "10")))
    max_iter: int = Field(default=int(os.getenv("QDS_MAX_ITER", "500")))
    ls_samples: int = Field(default=int(os.getenv("QDS_LS_SAMPLES", "33")))
    sphere_samples: int = Field(default=int(os.getenv("QDS_SPHERE_SAMPLES", "720")))
    sphere_grid: Tuple[int, int] = Field(default=_parse_grid_shape(os.getenv("QDS_SPHERE_GRID", "64x128")))
    seed: int = Field(default=int(os.getenv("QDS_SEED", "0")))
    workers: int = Field(default=int(os.getenv("QDS_WORKERS", "1")))

    @model_validator(mode="before")
    def normalize_grid(cls, values: Dict[str, Any]) -> Dict[str, Any]:
        grid = values.get("sphere_grid")
        if isinstance(grid, str):
            values["sphere_grid"] = _parse_grid_shape(grid)
        return values


class AppSettings(BaseModel):
    solver: SolverSettings = Field(default_factory=SolverSettings)
    output_dir: str = Field(default=os.getenv("QDS_OUTPUT_DIR", os.path.join(OUTPUT_ROOT_DEFAULT, "runs")))
    log_dir: str = Field(default=os.getenv("QDS_LOG_DIR", _LOG_DIR_DEFAULT))
    problems_dir: str = Field(default=os.getenv("QDS_PROBLEMS_DIR", _PROBLEMS_DIR_DEFAULT))
    max_combinations: int = Field(default=int(os.getenv("QDS_MAX_COMBINATIONS", "4096")))
    certificate_tolerance: float = Field(default=float(os.getenv("QDS_CERTIFICATE_TOL", "1e-8")))
    check_tolerance: float = Field(default=float(os.getenv("QDS_CHECK_TOL", "1e-2")))
    csv_digits: int = Field(default=int(os.getenv("QDS_CSV_DIGITS", "12")))
    verbose: bool = Field(default=_env_flag("QDS_VERBOSE", "true"))

    @model_validator(mode="after")
    def ensure_limits(self) -> "AppSettings":
        if self.max_combinations < 1:
            raise ValueError("QDS_MAX_COMBINATIONS must be positive")
        if self.csv_digits < 6:
            self.csv_digits = 6
        return self


def get_settings() -> AppSettings:
    return AppSettings()


SETTINGS = get_settings()
