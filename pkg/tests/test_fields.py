import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varlab.errors import DimensionError, SmoothnessError
from varlab.fields import (
    BracketField,
    ControlAffineSystem,
    ExprField,
    Grade,
    ad_power,
    lie_bracket,
    nested_bracket_gfg,
)


def F(*comps, grade=Grade.C2):
    return ExprField.from_strings(list(comps), grade)


def test_worked_example_bracket(worked):
    g1, g2 = worked.controlled
    assert lie_bracket(g1, g2, [2, 0, 0]).tolist() == [0.0, 0.0, 1.0]
    assert lie_bracket(g2, g1, [2, 0, 0]).tolist() == [0.0, 0.0, -1.0]


def test_quadratic_drift_brackets(quad2):
    f, (g,) = quad2.drift, quad2.controlled
    assert lie_bracket(f, g, [0, 0.5]).tolist() == [-1.0, 0.0]
    assert nested_bracket_gfg(f, g, [0.3, 0.5]).tolist() == [-2.0, 0.0]
    assert ad_power(g, f, 2, [1.0, 0.7]).tolist() == [2.0, 0.0]
    assert ad_power(f, g, 0, [1.0, 0.7]).tolist() == [0.0, 1.0]
    # f commutes with [f, g] here
    assert ad_power(f, g, 2, [1.0, 0.7]).tolist() == [0.0, 0.0]


def test_ad_power_limits(quad2):
    with pytest.raises(ValueError):
        ad_power(quad2.drift, quad2.controlled[0], 3, [0, 0])


def test_smoothness_gates():
    f = F("x2^2", "0", grade=Grade.C1)
    g = F("0", "1", grade=Grade.C1)
    assert lie_bracket(f, g, [0, 1]).tolist() == [-2.0, 0.0]
    with pytest.raises(SmoothnessError):
        nested_bracket_gfg(f, g, [0, 1])
    with pytest.raises(SmoothnessError):
        BracketField(F("x1", "x2", grade=Grade.C0), g)
    assert BracketField(F("x1", "x2", grade=Grade.C3), F("1", "0", grade=Grade.C3)).grade == Grade.C2


def test_dimension_mismatch():
    with pytest.raises(DimensionError):
        BracketField(F("x1", "x2"), F("x1", "x2", "x3"))
    with pytest.raises(DimensionError):
        ControlAffineSystem.from_strings(["0", "0"], [["1", "0", "0"]])


def test_system_accessors(worked):
    assert (worked.n, worked.m) == (3, 2)
    assert worked.fields[0] is worked.drift
    assert worked.is_polynomial and worked.grade == Grade.C2
    assert worked.dynamics([2, 1, 0], [-2, 3]).tolist() == [-2.0, 3.0, 2.0]
    J = worked.jacobian([2, 1, 0], [-2, 0])
    assert J[2, 1] == 2.0 and np.count_nonzero(J) == 1
    X = worked.closed_loop([-2, 0])
    assert X([2, 1, 0]).tolist() == [-2.0, 0.0, 2.0]
    assert X.jvp([2, 1, 0], [0, 1, 0]).tolist() == [0.0, 0.0, 2.0]


def test_second_derivative_by_polarization():
    X = F("x1*x2", "x1^3")
    # D²X[a,b] for X1 = x1 x2: a1 b2 + a2 b1; for X2 = x1^3: 6 x1 a1 b1
    out = X.second([2.0, 1.0], [1.0, 2.0], [3.0, -1.0])
    assert out.tolist() == pytest.approx([1 * -1 + 2 * 3, 6 * 2 * 1 * 3])


def test_bracket_jvp_matches_finite_difference(quad2):
    f, (g,) = quad2.drift, quad2.controlled
    B = BracketField(F("x1*x2", "sin(x1)"), F("x2^2", "x1"))
    x, v, h = np.array([0.4, -0.3]), np.array([0.7, 0.2]), 1e-6
    fd = (B(x + h * v) - B(x - h * v)) / (2 * h)
    assert np.allclose(B.jvp(x, v), fd, atol=1e-8)


# --------------------------------------------------------------- properties

coef = st.integers(-3, 3)


@st.composite
def quadratic_fields(draw, n=3):
    comps = []
    for _ in range(n):
        terms = [f"({draw(coef)})"]
        for i in range(1, n + 1):
            terms.append(f"({draw(coef)})*x{i}")
            for j in range(i, n + 1):
                terms.append(f"({draw(coef)})*x{i}*x{j}")
        comps.append(" + ".join(terms))
    return F(*comps)


points = st.lists(st.integers(-2, 2).map(float), min_size=3, max_size=3)


@settings(max_examples=40, deadline=None)
@given(quadratic_fields(), quadratic_fields(), points)
def test_bracket_antisymmetry(X, Y, x):
    assert np.array_equal(lie_bracket(X, Y, x), -lie_bracket(Y, X, x))


@settings(max_examples=30, deadline=None)
@given(quadratic_fields(), quadratic_fields(), quadratic_fields(), points)
def test_jacobi_identity(X, Y, Z, x):
    total = (
        BracketField(X, BracketField(Y, Z))(x)
        + BracketField(Y, BracketField(Z, X))(x)
        + BracketField(Z, BracketField(X, Y))(x)
    )
    # integer data: every term is exact
    assert np.array_equal(total, np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(quadratic_fields(), points)
def test_parallel_fields_commute(X, x):
    two = ExprField.from_strings([f"2*({c})" for c in X.components])
    assert np.array_equal(lie_bracket(X, two, x), np.zeros(3))
