"""Scalar expressions used by support models, surfaces and cost terms.

Grammar (whitespace-insensitive)::

    expr   := term (("+" | "-") term)*
    term   := unary (("*" | "/") unary)*
    unary  := ("+" | "-") unary | power
    power  := atom ("^" unary)?
    atom   := number | variable | func "(" expr ")" | "(" expr ")"
    func   := sin | cos | exp | sqrt | abs | sgn
    variable := x<i> | psi<i> | u<i> | t

Trees are sympy expressions over real symbols. Derivatives are exact;
``abs'(w) = sgn(w)`` with ``sgn(0) = +1`` and ``sgn' = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import sympy as sp
from sympy.printing.str import StrPrinter

from QDSolve.core.errors import (
    ExpressionDomainError,
    ExpressionSyntaxError,
    UndeclaredVariableError,
)

Number = Union[float, np.ndarray]


class sgn(sp.Function):
    """Sign function with sgn(0) = +1 and zero derivative everywhere."""

    @classmethod
    def eval(cls, arg):
        if arg.is_extended_negative:
            return sp.S.NegativeOne
        if arg.is_extended_nonnegative:
            return sp.S.One
        return None

    def fdiff(self, argindex=1):
        return sp.S.Zero


def _np_sgn(w):
    return np.where(np.asarray(w) < 0, -1.0, 1.0)


_FUNCTIONS: Dict[str, Callable[[sp.Expr], sp.Expr]] = {
    "sin": sp.sin,
    "cos": sp.cos,
    "exp": sp.exp,
    "sqrt": sp.sqrt,
    "abs": sp.Abs,
    "sgn": sgn,
}

_LAMBDIFY_MODULES = [{"sgn": _np_sgn}, "numpy"]


@dataclass(frozen=True)
class Dimensions:
    """Dimension header: which variables an expression may reference."""

    n: int
    nu: int = 0

    @cached_property
    def names(self) -> Tuple[str, ...]:
        xs = [f"x{i}" for i in range(1, self.n + 1)]
        psis = [f"psi{i}" for i in range(1, self.n + 1)]
        us = [f"u{i}" for i in range(1, self.nu + 1)]
        return tuple(xs + psis + us + ["t"])

    def symbol(self, name: str) -> sp.Symbol:
        return sp.Symbol(name, real=True)


# ── printing ─────────────────────────────────────────────────────


class _ExprPrinter(StrPrinter):
    def _print_Abs(self, expr):
        return f"abs({self._print(expr.args[0])})"

    def _print_Exp1(self, expr):
        return "exp(1)"


def _to_text(tree: sp.Expr) -> str:
    return _ExprPrinter().doprint(tree).replace("**", "^")


# ── tokenizer / parser ───────────────────────────────────────────


def _tokenize(text: str) -> List[Tuple[str, str, int]]:
    tokens: List[Tuple[str, str, int]] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in " \t\r\n":
            i += 1
            continue

        # number (supports scientific notation like 1e-3)
        if ch.isdigit() or ch == ".":
            j = i
            dot = 0
            while j < n and (text[j].isdigit() or text[j] == "."):
                if text[j] == ".":
                    dot += 1
                    if dot > 1:
                        raise ExpressionSyntaxError("Malformed number", text, j)
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    while k < n and text[k].isdigit():
                        k += 1
                    j = k
            if text[i:j] == ".":
                raise ExpressionSyntaxError("Malformed number", text, i)
            tokens.append(("num", text[i:j], i))
            i = j
            continue

        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("id", text[i:j], i))
            i = j
            continue

        if ch in "+-*/^(),":
            tokens.append(("sym", ch, i))
            i += 1
            continue

        raise ExpressionSyntaxError(f"Unexpected character {ch!r}", text, i)
    return tokens


class _Parser:
    def __init__(self, text: str, dims: Dimensions) -> None:
        self.text = text
        self.dims = dims
        self.tokens = _tokenize(text)
        self.pos = 0

    def _peek(self) -> Optional[Tuple[str, str, int]]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def _fail(self, message: str) -> ExpressionSyntaxError:
        tok = self._peek()
        offset = tok[2] if tok else len(self.text)
        found = f" '{tok[1]}'" if tok else " end of input"
        return ExpressionSyntaxError(f"{message}, found{found}", self.text, offset)

    def _accept(self, sym: str) -> bool:
        tok = self._peek()
        if tok and tok[0] == "sym" and tok[1] == sym:
            self.pos += 1
            return True
        return False

    def _expect(self, sym: str) -> None:
        if not self._accept(sym):
            raise self._fail(f"Expected '{sym}'")

    def parse(self) -> sp.Expr:
        if not self.tokens:
            raise ExpressionSyntaxError("Empty expression", self.text, 0)
        tree = self._expr()
        if self._peek() is not None:
            raise self._fail("Unexpected token")
        return tree

    def _expr(self) -> sp.Expr:
        left = self._term()
        while True:
            if self._accept("+"):
                left = left + self._term()
            elif self._accept("-"):
                left = left - self._term()
            else:
                return left

    def _term(self) -> sp.Expr:
        left = self._unary()
        while True:
            if self._accept("*"):
                left = left * self._unary()
            elif self._accept("/"):
                left = left / self._unary()
            else:
                return left

    def _unary(self) -> sp.Expr:
        if self._accept("-"):
            return -self._unary()
        if self._accept("+"):
            return self._unary()
        return self._power()

    def _power(self) -> sp.Expr:
        base = self._atom()
        if self._accept("^"):
            return sp.Pow(base, self._unary())
        return base

    def _atom(self) -> sp.Expr:
        tok = self._peek()
        if tok is None:
            raise self._fail("Expected operand")
        kind, value, offset = tok
        if kind == "num":
            self.pos += 1
            frac = Fraction(value)
            return sp.Rational(frac.numerator, frac.denominator)
        if kind == "id":
            self.pos += 1
            if value in _FUNCTIONS:
                if not self._accept("("):
                    raise self._fail(f"Expected '(' after {value}")
                arg = self._expr()
                self._expect(")")
                return _FUNCTIONS[value](arg)
            nxt = self._peek()
            if nxt and nxt[0] == "sym" and nxt[1] == "(":
                raise ExpressionSyntaxError(f"Unknown function '{value}'", self.text, offset)
            if value not in self.dims.names:
                raise UndeclaredVariableError(value, self.text, offset)
            return self.dims.symbol(value)
        if kind == "sym" and value == "(":
            self.pos += 1
            inner = self._expr()
            self._expect(")")
            return inner
        raise self._fail("Expected operand")


# ── Expression ───────────────────────────────────────────────────


@dataclass(frozen=True)
class Expression:
    tree: sp.Expr
    dims: Dimensions
    _grad_cache: Dict[Tuple[str, ...], Tuple["Expression", ...]] = field(
        default_factory=dict, compare=False, repr=False
    )

    def __str__(self) -> str:
        return _to_text(self.tree)

    @cached_property
    def free_names(self) -> Tuple[str, ...]:
        return tuple(sorted(s.name for s in self.tree.free_symbols))

    @cached_property
    def _compiled(self) -> Callable:
        symbols = [self.dims.symbol(name) for name in self.free_names]
        return sp.lambdify(symbols, self.tree, modules=_LAMBDIFY_MODULES)

    def evaluate(self, point: Mapping[str, Number]) -> Number:
        """Evaluate at a point; array values broadcast (nodes, ψ samples)."""
        try:
            args = [np.asarray(point[name], dtype=float) for name in self.free_names]
        except KeyError as exc:
            raise ValueError(f"Unassigned variable {exc.args[0]} in '{self}'") from None
        shape = np.broadcast_shapes(*(np.shape(v) for v in point.values())) if point else ()
        with np.errstate(all="ignore"):
            value = np.asarray(self._compiled(*args), dtype=float)
        if value.shape != shape:
            value = np.broadcast_to(value, np.broadcast_shapes(value.shape, shape))
        if not np.all(np.isfinite(value)):
            raise self._domain_error(point, value)
        if value.ndim == 0:
            return float(value)
        return np.array(value)

    def _domain_error(self, point: Mapping[str, Number], value: np.ndarray) -> ExpressionDomainError:
        node: Optional[int] = None
        if value.ndim == 1:
            node = int(np.flatnonzero(~np.isfinite(value))[0])
        env = {self.dims.symbol(k): np.asarray(v, dtype=float) for k, v in point.items()}
        for sub in sp.postorder_traversal(self.tree):
            if sub.is_Atom:
                continue
            names = sorted(s.name for s in sub.free_symbols)
            fn = sp.lambdify([self.dims.symbol(k) for k in names], sub, modules=_LAMBDIFY_MODULES)
            with np.errstate(all="ignore"):
                sub_value = np.asarray(fn(*[env[self.dims.symbol(k)] for k in names]), dtype=float)
            if not np.all(np.isfinite(sub_value)):
                return ExpressionDomainError(_to_text(sub), node)
        return ExpressionDomainError(str(self), node)

    def differentiate(self, var: str) -> "Expression":
        if var not in self.dims.names:
            raise UndeclaredVariableError(var, str(self), 0)
        derivative = sp.diff(self.tree, self.dims.symbol(var))
        derivative = derivative.replace(sp.sign, sgn)
        return Expression(derivative, self.dims)

    def gradient(self, names: Sequence[str]) -> Tuple["Expression", ...]:
        key = tuple(names)
        cached = self._grad_cache.get(key)
        if cached is None:
            cached = tuple(self.differentiate(name) for name in key)
            self._grad_cache[key] = cached
        return cached

    def references(self, prefix: str) -> List[str]:
        return [name for name in self.free_names if name.startswith(prefix) and name[len(prefix):].isdigit()]


def parse_expression(text: str, dims: Dimensions) -> Expression:
    tree = _Parser(text, dims).parse()
    if tree.has(sp.zoo, sp.oo, -sp.oo, sp.nan, sp.I):
        raise ExpressionDomainError(text.strip())
    return Expression(sp.sympify(tree), dims)


def evaluate(e: Expression, point: Mapping[str, Number]) -> Number:
    return e.evaluate(point)


def differentiate(e: Expression, var: str) -> Expression:
    return e.differentiate(var)


def print_expression(e: Expression) -> str:
    return str(e)
