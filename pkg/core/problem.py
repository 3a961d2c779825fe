"""Problem files: schema, validation, built-in examples and support evaluation."""

from __future__ import annotations

import json
import os
from typing import Any, Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from QDSolve.config.config import SETTINGS
from QDSolve.core.errors import (
    ExpressionDomainError,
    ExpressionSyntaxError,
    ProblemFormatError,
    UndeclaredVariableError,
)
from QDSolve.core.expr import Dimensions, Expression, parse_expression, sgn
from QDSolve.core.models import (
    Channel,
    InitialGuess,
    ProblemSpec,
    SolverParams,
    SupportModel,
    Terms,
)


# ── file schema ──────────────────────────────────────────────────


class TermsFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_terms: List[List[str]] = Field(default_factory=list)
    min_terms: List[List[str]] = Field(default_factory=list)


class ChannelFile(TermsFile):
    kind: Literal["inclusion", "equation"] = "inclusion"
    rhs: Optional[str] = None


class TerminalFile(BaseModel):
    index: int
    value: float


class InitialFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    x: Optional[List[str]] = None
    z: Optional[List[str]] = None
    u: Optional[List[str]] = None


class ProblemFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    description: str = ""
    reference: str = ""
    n: int
    nu: int = 0
    T: float
    x0: List[float]
    terminal: List[TerminalFile] = Field(default_factory=list)
    surface: List[str] = Field(default_factory=list)
    mode: Literal["coordinate", "vector"] = "coordinate"
    channels: List[ChannelFile] = Field(default_factory=list)
    vector_model: Optional[TermsFile] = None
    cost: List[List[str]] = Field(default_factory=list)
    penalty: Optional[float] = None
    initial: Optional[InitialFile] = None
    solver: Dict[str, Any] = Field(default_factory=dict)


# ── building ─────────────────────────────────────────────────────


def _parse(text: str, dims: Dimensions, where: str, allowed: Sequence[str]) -> Expression:
    try:
        expr = parse_expression(text, dims)
    except (ExpressionSyntaxError, UndeclaredVariableError, ExpressionDomainError) as exc:
        raise ProblemFormatError(where, str(exc)) from None
    stray = [name for name in expr.free_names if name not in allowed]
    if stray:
        raise ProblemFormatError(where, f"'{text}' may not reference {', '.join(stray)}")
    return expr


def _parse_terms(
    raw: List[List[str]], dims: Dimensions, where: str, allowed: Sequence[str]
) -> Terms:
    terms = []
    for j, term in enumerate(raw):
        if not term:
            raise ProblemFormatError(f"{where}[{j}]", "empty term")
        terms.append(tuple(_parse(text, dims, f"{where}[{j}][{q}]", allowed) for q, text in enumerate(term)))
    return tuple(terms)


def _build_model(raw: TermsFile, dims: Dimensions, where: str, coordinate: Optional[int]) -> SupportModel:
    xs = [f"x{k}" for k in range(1, dims.n + 1)]
    if coordinate is None:
        psis = [f"psi{k}" for k in range(1, dims.n + 1)]
        max_allowed = xs + psis
    else:
        psis = [f"psi{coordinate}"]
        max_allowed = xs
    model = SupportModel(
        max_terms=_parse_terms(raw.max_terms, dims, f"{where}.max_terms", max_allowed),
        min_terms=_parse_terms(raw.min_terms, dims, f"{where}.min_terms", xs + psis),
        vector=coordinate is None,
        coordinate=coordinate,
    )
    if model.term_count == 0:
        raise ProblemFormatError(where, "support model needs at least one max- or min-term")
    return model


def build_problem(raw: ProblemFile, source: Optional[str] = None) -> ProblemSpec:
    if raw.n < 1:
        raise ProblemFormatError("n", f"state dimension must be >= 1, got {raw.n}")
    if raw.nu < 0:
        raise ProblemFormatError("nu", f"control dimension must be >= 0, got {raw.nu}")
    if not raw.T > 0:
        raise ProblemFormatError("T", f"horizon must be positive, got {raw.T}")
    if len(raw.x0) != raw.n:
        raise ProblemFormatError("x0", f"expected {raw.n} values, got {len(raw.x0)}")

    dims = Dimensions(raw.n, raw.nu)
    xs = [f"x{k}" for k in range(1, raw.n + 1)]
    us = [f"u{k}" for k in range(1, raw.nu + 1)]

    terminal: List[Tuple[int, float]] = []
    seen = set()
    for pos, entry in enumerate(raw.terminal):
        if not 1 <= entry.index <= raw.n:
            raise ProblemFormatError(f"terminal[{pos}].index", f"{entry.index} outside 1..{raw.n}")
        if entry.index in seen:
            raise ProblemFormatError(f"terminal[{pos}].index", f"duplicate index {entry.index}")
        seen.add(entry.index)
        terminal.append((entry.index, float(entry.value)))

    surface = tuple(_parse(text, dims, f"surface[{j}]", xs) for j, text in enumerate(raw.surface))

    channels: List[Channel] = []
    vector_model: Optional[SupportModel] = None
    if raw.mode == "vector":
        if raw.n > 3:
            raise ProblemFormatError("mode", f"vector mode supports n <= 3, got n={raw.n}")
        if raw.vector_model is None:
            raise ProblemFormatError("vector_model", "required in vector mode")
        if raw.channels:
            raise ProblemFormatError("channels", "vector mode takes its right-hand side from vector_model")
        vector_model = _build_model(raw.vector_model, dims, "vector_model", None)
    else:
        if raw.vector_model is not None:
            raise ProblemFormatError("vector_model", "only allowed with mode 'vector'")
        if len(raw.channels) != raw.n:
            raise ProblemFormatError("channels", f"expected {raw.n} channels, got {len(raw.channels)}")
        for i, ch in enumerate(raw.channels, start=1):
            where = f"channels[{i - 1}]"
            if ch.kind == "equation":
                if ch.rhs is None:
                    raise ProblemFormatError(f"{where}.rhs", "equation channel needs rhs")
                if ch.max_terms or ch.min_terms:
                    raise ProblemFormatError(where, "equation channel takes no support terms")
                channels.append(Channel(i, "equation", rhs=_parse(ch.rhs, dims, f"{where}.rhs", xs + us)))
            else:
                if ch.rhs is not None:
                    raise ProblemFormatError(f"{where}.rhs", "inclusion channel takes support terms, not rhs")
                channels.append(Channel(i, "inclusion", model=_build_model(ch, dims, where, i)))

    cost = _parse_terms(raw.cost, dims, "cost", xs + us)

    penalty = SETTINGS.solver.penalty if raw.penalty is None else float(raw.penalty)
    if not penalty > 0:
        raise ProblemFormatError("penalty", f"must be positive, got {penalty}")

    initial: Optional[InitialGuess] = None
    if raw.initial is not None:
        parts: Dict[str, Optional[Tuple[Expression, ...]]] = {}
        for key, size in (("x", raw.n), ("z", raw.n), ("u", raw.nu)):
            texts = getattr(raw.initial, key)
            if texts is None:
                parts[key] = None
                continue
            if len(texts) != size:
                raise ProblemFormatError(f"initial.{key}", f"expected {size} expressions, got {len(texts)}")
            parts[key] = tuple(_parse(text, dims, f"initial.{key}[{j}]", ["t"]) for j, text in enumerate(texts))
        initial = InitialGuess(**parts)

    try:
        params = SolverParams(**raw.solver)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err.get("loc", ()))
        raise ProblemFormatError(f"solver.{loc}", err.get("msg", "invalid value")) from None

    return ProblemSpec(
        name=raw.name,
        description=raw.description,
        reference=raw.reference,
        n=raw.n,
        nu=raw.nu,
        T=float(raw.T),
        x0=tuple(float(v) for v in raw.x0),
        terminal=tuple(terminal),
        surface=surface,
        channels=tuple(channels),
        cost=cost,
        penalty=penalty,
        params=params,
        dims=dims,
        vector_model=vector_model,
        initial=initial,
        source=source,
    )


def parse_problem_text(text: str, source: Optional[str] = None) -> ProblemSpec:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProblemFormatError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        raw = ProblemFile.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err.get("loc", ())) or "<file>"
        raise ProblemFormatError(loc, err.get("msg", "invalid value")) from None
    return build_problem(raw, source=source)


def load_problem(path: str) -> ProblemSpec:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_problem_text(fh.read(), source=path)


# ── built-in examples ────────────────────────────────────────────


def builtin_example_paths() -> Dict[str, str]:
    root = SETTINGS.problems_dir
    if not os.path.isdir(root):
        return {}
    return {
        os.path.splitext(fname)[0]: os.path.join(root, fname)
        for fname in sorted(os.listdir(root))
        if fname.endswith(".json")
    }


def builtin_examples() -> List[ProblemSpec]:
    return [load_problem(path) for path in builtin_example_paths().values()]


def get_example(name: str) -> ProblemSpec:
    paths = builtin_example_paths()
    path = paths.get(name)
    if not path:
        raise ValueError(f"Unknown example: {name} (available: {', '.join(paths)})")
    return load_problem(path)


def resolve_problem(ref: str) -> ProblemSpec:
    """A path to a problem file, or the name of a built-in example."""
    if os.path.isfile(ref):
        return load_problem(ref)
    if ref in builtin_example_paths():
        return get_example(ref)
    raise FileNotFoundError(f"file not found: {ref}")


def describe_problem(spec: ProblemSpec) -> str:
    kinds = "vector" if spec.vector_mode else "/".join(ch.kind[:3] for ch in spec.channels)
    extras = []
    if spec.surface:
        extras.append(f"{len(spec.surface)} surface")
    if spec.has_cost:
        extras.append(f"cost, lambda={spec.penalty:g}")
    head = f"n={spec.n} nu={spec.nu} T={spec.T:g} [{kinds}]"
    if extras:
        head += " " + ", ".join(extras)
    return f"{head}; {spec.description}" if spec.description else head


def switching_surfaces(spec: ProblemSpec) -> Tuple[Expression, ...]:
    """Arguments of ``sgn`` over x and u: the surfaces where a right-hand side jumps."""
    exprs: List[Expression] = list(spec.surface)
    for term in spec.cost:
        exprs.extend(term)
    models = [ch.model for ch in spec.channels if ch.model is not None]
    if spec.vector_model is not None:
        models.append(spec.vector_model)
    for m in models:
        for term in m.max_terms + m.min_terms:
            exprs.extend(term)
    exprs.extend(ch.rhs for ch in spec.channels if ch.rhs is not None)

    found: Dict[str, Expression] = {}
    for e in exprs:
        for atom in e.tree.atoms(sgn):
            arg = Expression(atom.args[0], e.dims)
            if arg.references("psi"):
                continue
            if arg.references("x") or arg.references("u"):
                found.setdefault(str(arg.tree), arg)
    return tuple(found.values())


# ── support evaluation ───────────────────────────────────────────


def support_env(m: SupportModel, x: np.ndarray, psi: Union[float, np.ndarray]) -> Dict[str, Any]:
    x = np.asarray(x, dtype=float)
    env: Dict[str, Any] = {f"x{k + 1}": x[..., k] for k in range(x.shape[-1])}
    psi = np.asarray(psi, dtype=float)
    if m.vector:
        for k in range(psi.shape[-1]):
            env[f"psi{k + 1}"] = psi[..., k]
    else:
        env[f"psi{m.coordinate}"] = psi
    return env


def _stack(values: List[Any]) -> np.ndarray:
    return np.stack(np.broadcast_arrays(*[np.asarray(v, dtype=float) for v in values]), axis=-1)


def branch_values(
    m: SupportModel, x: np.ndarray, psi: Union[float, np.ndarray]
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Per-term branch values; the last axis enumerates the branches."""
    env = support_env(m, x, psi)
    factor = 1.0 if m.vector else np.asarray(psi, dtype=float)
    max_vals = [_stack([f.evaluate(env) * factor for f in term]) for term in m.max_terms]
    min_vals = [_stack([g.evaluate(env) for g in term]) for term in m.min_terms]
    return max_vals, min_vals


def eval_support(m: SupportModel, x: np.ndarray, psi: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    max_vals, min_vals = branch_values(m, x, psi)
    total: Any = 0.0
    for vals in max_vals:
        total = total + np.max(vals, axis=-1)
    for vals in min_vals:
        total = total + np.min(vals, axis=-1)
    total = np.asarray(total, dtype=float)
    return float(total) if total.ndim == 0 else total
