import math

import numpy as np
import pytest

from QDSolve.core.errors import ExpressionDomainError, ExpressionSyntaxError, UndeclaredVariableError
from QDSolve.core.expr import Dimensions, differentiate, evaluate, parse_expression, print_expression

DIMS = Dimensions(n=2, nu=1)


def parse(text):
    return parse_expression(text, DIMS)


def test_parse_and_evaluate_sum():
    e = parse("x1^2 + sin(x2)")
    assert len(e.tree.args) == 2
    assert evaluate(e, {"x1": 2.0, "x2": 0.0}) == pytest.approx(4.0)


def test_syntax_error_reports_offset():
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("x1 +* x2")
    assert info.value.position == 4


@pytest.mark.parametrize("text, offset", [("x1 + (x2", 8), ("2 ** x1", 3), ("x1 $ 2", 3), ("", 0)])
def test_syntax_error_offsets(text, offset):
    with pytest.raises(ExpressionSyntaxError) as info:
        parse(text)
    assert info.value.position == offset


def test_undeclared_variable():
    with pytest.raises(UndeclaredVariableError) as info:
        parse("x1 + x3")
    assert info.value.name == "x3"
    assert info.value.position == 5


def test_unknown_function_is_syntax_error():
    with pytest.raises(ExpressionSyntaxError, match="Unknown function"):
        parse("tan(x1)")


def test_ellipse_support_expression():
    e = parse("sqrt((x1^2+3)*psi1^2 + psi2^2) + 2*psi1")
    value = evaluate(e, {"x1": 1.0, "psi1": 1.0, "psi2": 0.0})
    assert value == pytest.approx(4.0)


def test_abs_from_min_term():
    e = parse("abs(x1-x2)/2")
    assert evaluate(e, {"x1": -1.0, "x2": -2.0}) == pytest.approx(0.5)


@pytest.mark.parametrize("text, point", [("1/x1", {"x1": 0.0}), ("sqrt(x1)", {"x1": -1.0}), ("x1^0.5", {"x1": -4.0})])
def test_domain_errors(text, point):
    with pytest.raises(ExpressionDomainError):
        evaluate(parse(text), point)


def test_domain_error_names_subexpression_and_node():
    e = parse("x2 + sqrt(x1)")
    with pytest.raises(ExpressionDomainError) as info:
        e.evaluate({"x1": np.array([1.0, 4.0, -1.0]), "x2": np.zeros(3)})
    assert info.value.subexpression == "sqrt(x1)"
    assert info.value.node == 2


def test_integer_power_of_negative_base():
    assert evaluate(parse("x1^3"), {"x1": -2.0}) == pytest.approx(-8.0)


def test_derivative_of_polynomial_prints():
    d = differentiate(parse("x1^2 + sin(x2)"), "x1")
    assert print_expression(d) == "2*x1"


def test_abs_derivative_sign_convention():
    d = differentiate(parse("abs(x1)"), "x1")
    assert evaluate(d, {"x1": 3.0}) == 1.0
    assert evaluate(d, {"x1": -3.0}) == -1.0
    assert evaluate(d, {"x1": 0.0}) == 1.0


def test_sgn_has_zero_derivative():
    e = parse("0.3*sgn(x1) + x1")
    d = differentiate(e, "x1")
    assert evaluate(d, {"x1": -2.0}) == pytest.approx(1.0)
    assert evaluate(e, {"x1": 0.0}) == pytest.approx(0.3)


def test_derivative_matches_finite_differences():
    rng = np.random.default_rng(7)
    texts = [
        "3*x1^3 - 2*x1*x2 + x2^2 - 5",
        "exp(x1/3)*cos(x2) + sqrt(x1^2 + 1)",
        "x1^4*x2 - 7*x2^3 + 0.5*x1 + u1*x1",
    ]
    h = 1e-6
    for text in texts:
        e = parse(text)
        for var in ("x1", "x2"):
            d = differentiate(e, var)
            for _ in range(20):
                point = {"x1": rng.uniform(-2, 2), "x2": rng.uniform(-2, 2), "u1": rng.uniform(-1, 1)}
                plus = dict(point, **{var: point[var] + h})
                minus = dict(point, **{var: point[var] - h})
                fd = (evaluate(e, plus) - evaluate(e, minus)) / (2 * h)
                exact = evaluate(d, point)
                assert abs(fd - exact) <= 1e-6 * max(1.0, abs(exact))


@pytest.mark.parametrize(
    "text",
    [
        "x1^2 + sin(x2)",
        "(x1 + x2)/2*psi1 + abs(x1 - x2)/2",
        "sqrt((x1^2 + 3)*psi1^2 + psi2^2) + 2*psi1",
        "x1 - 2*x2 + u1 - 0.3*sgn(x2)",
        "exp(-t)*x1^(-2)",
        "x1^(1/3) - exp(1)",
    ],
)
def test_print_then_parse_is_identity(text):
    e = parse(text)
    again = parse(print_expression(e))
    assert again.tree == e.tree


def test_vectorised_evaluation_broadcasts_constants():
    e = parse("2")
    out = e.evaluate({"x1": np.zeros(5)})
    assert out.shape == (5,)
    assert np.all(out == 2.0)


def test_gradient_is_cached():
    e = parse("x1*x2")
    first = e.gradient(("x1", "x2"))
    assert e.gradient(("x1", "x2")) is first
    assert [evaluate(g, {"x1": 2.0, "x2": 3.0}) for g in first] == [3.0, 2.0]


def test_evaluate_missing_variable():
    with pytest.raises(ValueError, match="Unassigned variable"):
        evaluate(parse("x1 + x2"), {"x1": 1.0})


def test_constants_are_exact():
    e = parse("0.1 + 0.2")
    assert e.tree == parse("3/10").tree
    assert math.isclose(evaluate(e, {}), 0.3)
