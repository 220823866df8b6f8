import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varlab.errors import (
    DimensionError,
    ExprSyntaxError,
    SingularEvaluationError,
    UnknownIdentifierError,
    VariableIndexError,
)
from varlab.exprcore import Dual2, constant, eval_dual, parse


def test_examples(backend):
    assert parse("-x2", 3)([2, 0, 0]) == 0.0
    assert parse("x1*x1 - x1^2", 1)([1.7]) == 0.0
    assert parse("sin(x1)", 2)([0.5, 9.0]) == math.sin(0.5)


def test_eval_dual_examples(backend):
    assert eval_dual(parse("x1*x2", 2), [3, 4], [1, 0]) == Dual2(12.0, 4.0, 0.0)
    assert eval_dual(parse("-x2", 3), [2, 0, 0], [0, 1, 0]) == Dual2(0.0, -1.0, 0.0)


def test_eval_dual_matches_finite_differences(backend):
    d = eval_dual(parse("x2^2", 2), [0, 1], [0, 1])
    e = parse("x2^2", 2)
    h = 1e-5
    fd1 = (e([0, 1 + h]) - e([0, 1 - h])) / (2 * h)
    fd2 = (e([0, 1 + h]) - 2 * e([0, 1]) + e([0, 1 - h])) / h**2
    assert d.value == 1.0
    assert abs(d.d1 - fd1) < 1e-8 and abs(d.d2 - fd2) < 1e-4
    assert (d.d1, d.d2) == (2.0, 2.0)


def test_precedence():
    # pow binds tighter than unary minus, which binds tighter than * and /
    assert parse("-x1^2", 1)([3]) == -9.0
    assert parse("2*-x1", 1)([3]) == -6.0
    assert parse("x1-x1-x1", 1)([1]) == -1.0
    assert parse("8/4/2", 1)([0]) == 1.0
    assert parse("x1^-2", 1)([2]) == 0.25
    assert parse("x1^(-2)", 1)([2]) == 0.25
    assert parse("1e-3*x1", 1)([1000]) == pytest.approx(1.0)


@pytest.mark.parametrize(
    "text, cls, offset",
    [
        ("x1 +", ExprSyntaxError, 4),
        ("x1 * (x2", ExprSyntaxError, 8),
        ("y1", UnknownIdentifierError, 0),
        ("foo(x1)", UnknownIdentifierError, 0),
        ("x1 + x4", VariableIndexError, 5),
        ("x0", VariableIndexError, 0),
        ("x1 $ 2", ExprSyntaxError, 3),
        ("x1^x2", ExprSyntaxError, 3),
    ],
)
def test_errors_carry_byte_offsets(text, cls, offset):
    with pytest.raises(cls) as info:
        parse(text, 3)
    assert info.value.offset == offset
    assert f"offset {offset}" in str(info.value)


def test_byte_offset_counts_utf8():
    with pytest.raises(ExprSyntaxError) as info:
        parse("x1 + é", 1)
    assert info.value.offset == 5


@pytest.mark.parametrize("text, x", [("1/x1", [0.0]), ("log(x1)", [0.0]), ("log(x1)", [-1.0]), ("x1^-1", [0.0])])
def test_singular_evaluation_is_reported(backend, text, x):
    with pytest.raises(SingularEvaluationError):
        parse(text, 1)(x)
    with pytest.raises(SingularEvaluationError):
        eval_dual(parse(text, 1), x, [1.0])


def test_dimension_checks():
    with pytest.raises(DimensionError):
        parse("x1", 2)([1.0])
    with pytest.raises(DimensionError):
        parse("x1", 0)
    assert constant(2.5, 3)([0, 0, 0]) == 2.5


def test_polynomial_flag():
    assert parse("x1*x2 - 3*x1^4", 2).is_polynomial
    assert not parse("sin(x1)", 1).is_polynomial
    assert not parse("1/x1", 1).is_polynomial
    assert not parse("x1^-1", 1).is_polynomial


def test_immutable():
    e = parse("x1", 1)
    with pytest.raises(AttributeError):
        e.n = 3


# ---------------------------------------------------------------- properties

_leaf = st.one_of(
    st.integers(1, 3).map(lambda k: f"x{k}"),
    st.floats(-5, 5, allow_nan=False).map(lambda v: f"({v!r})"),
)


def _grow(children):
    return st.one_of(
        st.tuples(children, st.sampled_from("+-*"), children).map(lambda t: f"({t[0]} {t[1]} {t[2]})"),
        children.map(lambda c: f"-{c}"),
        st.tuples(children, st.integers(0, 3)).map(lambda t: f"{t[0]}^{t[1]}"),
        st.tuples(st.sampled_from(["sin", "cos"]), children).map(lambda t: f"{t[0]}({t[1]})"),
    )


expressions = st.recursive(_leaf, _grow, max_leaves=8)


@settings(max_examples=60, deadline=None)
@given(expressions)
def test_print_parse_round_trip(text):
    e = parse(text, 3)
    again = parse(str(e), 3)
    pts = np.random.default_rng(1).uniform(-2, 2, (100, 3))
    for x in pts:
        a, b = e(x), again(x)
        assert a == b or (math.isnan(a) and math.isnan(b))


def _poly_strategy():
    monomial = st.tuples(st.integers(0, 2), st.integers(0, 2), st.integers(-4, 4))
    return st.lists(monomial, min_size=1, max_size=5)


def _poly_text(terms):
    return " + ".join(f"({c})*x1^{i}*x2^{j}" for i, j, c in terms)


def _poly_eval(terms, x, v):
    """Exact value, first and second directional derivatives of Σ c x1^i x2^j."""
    val = d1 = d2 = 0.0
    x1, x2 = x
    a, b = v
    for i, j, c in terms:
        val += c * x1**i * x2**j
        fx = c * i * x1 ** max(i - 1, 0) * x2**j if i else 0.0
        fy = c * j * x1**i * x2 ** max(j - 1, 0) if j else 0.0
        fxx = c * i * (i - 1) * x1 ** max(i - 2, 0) * x2**j if i > 1 else 0.0
        fyy = c * j * (j - 1) * x1**i * x2 ** max(j - 2, 0) if j > 1 else 0.0
        fxy = c * i * j * x1 ** max(i - 1, 0) * x2 ** max(j - 1, 0) if i and j else 0.0
        d1 += fx * a + fy * b
        d2 += fxx * a * a + 2 * fxy * a * b + fyy * b * b
    return val, d1, d2


small_ints = st.integers(-3, 3).map(float)


@settings(max_examples=80, deadline=None)
@given(_poly_strategy(), st.tuples(small_ints, small_ints), st.tuples(small_ints, small_ints))
def test_polynomial_duals_are_exact(terms, x, v):
    d = eval_dual(parse(_poly_text(terms), 2), list(x), list(v))
    assert (d.value, d.d1, d.d2) == _poly_eval(terms, x, v)


@settings(max_examples=40, deadline=None)
@given(expressions, st.floats(-3, 3, allow_nan=False))
def test_directional_linearity(text, a):
    e = parse(text, 3)
    x = np.array([0.3, -0.7, 1.1])
    v = np.array([0.5, 0.25, -1.0])
    base = eval_dual(e, x, v).d1
    scaled = eval_dual(e, x, a * v).d1
    assert scaled == pytest.approx(a * base, rel=1e-12, abs=1e-12 * (1 + abs(base)))


def test_dual2_leibniz_rules():
    u, w = Dual2(2.0, 3.0, 5.0), Dual2(-1.0, 0.5, 2.0)
    p = u * w
    assert (p.value, p.d1, p.d2) == (-2.0, 3.0 * -1.0 + 2.0 * 0.5, 5.0 * -1.0 + 2 * 3.0 * 0.5 + 2.0 * 2.0)
    q = u / w
    back = q * w
    assert back.value == pytest.approx(u.value) and back.d1 == pytest.approx(u.d1) and back.d2 == pytest.approx(u.d2)
    assert (u**3).d2 == pytest.approx(3 * 2.0**2 * 5.0 + 6 * 2.0 * 9.0)
