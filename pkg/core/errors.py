"""Exceptions raised by the solver.

They subclass the builtin error types so callers can keep catching
``ValueError`` / ``RuntimeError`` where that is all they care about.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class ExpressionSyntaxError(ValueError):
    def __init__(self, message: str, text: str, position: int) -> None:
        super().__init__(f"{message} at offset {position}: {text!r}")
        self.text = text
        self.position = position


class UndeclaredVariableError(ValueError):
    def __init__(self, name: str, text: str, position: int) -> None:
        super().__init__(f"Undeclared variable '{name}' at offset {position}: {text!r}")
        self.name = name
        self.text = text
        self.position = position


class ExpressionDomainError(ArithmeticError):
    def __init__(self, subexpression: str, node: Optional[int] = None) -> None:
        where = f" at node {node}" if node is not None else ""
        super().__init__(f"Domain error in '{subexpression}'{where}")
        self.subexpression = subexpression
        self.node = node

    def at_node(self, node: int) -> "ExpressionDomainError":
        return ExpressionDomainError(self.subexpression, node)


class ProblemFormatError(ValueError):
    def __init__(self, field: str, message: str) -> None:
        super().__init__(f"{field}: {message}")
        self.field = field


class GridMismatchError(ValueError):
    pass


class CombinationLimitError(RuntimeError):
    def __init__(self, count: int, limit: int, node: Optional[int] = None) -> None:
        where = f" at node {node}" if node is not None else ""
        super().__init__(f"Generator combinations {count} exceed limit {limit}{where}")
        self.count = count
        self.limit = limit
        self.node = node


class NumericalFailure(RuntimeError):
    def __init__(
        self,
        message: str,
        iteration: Optional[int] = None,
        node: Optional[int] = None,
        diagnostics: Optional[Dict[str, Any]] = None,
    ) -> None:
        parts = [message]
        if iteration is not None:
            parts.append(f"iteration={iteration}")
        if node is not None:
            parts.append(f"node={node}")
        super().__init__(" ".join(parts))
        self.message = message
        self.iteration = iteration
        self.node = node
        self.diagnostics = dict(diagnostics or {})
