from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp

from varlab.errors import BlowUpError, DimensionError, GridMismatchError
from varlab.fields import ControlAffineSystem, ExprField
from varlab.flows import (
    ControlSignal,
    adjoint_solve,
    default_step,
    exp_flow,
    exp_product_order2,
    fundamental_matrix,
    integrate,
    integrate_coefficients,
    iterated_integrals,
    node_grid,
    variational_solve,
)


@pytest.fixture
def pw_control():
    return ControlSignal([0.0, 0.3, 0.55, 1.0], [[0.5, -1.0], [-0.25, 2.0], [1.0, 0.0]])


# ------------------------------------------------------------- controls


def test_control_signal_basics(pw_control):
    u = pw_control
    assert (u.m, u.cells, u.horizon) == (2, 3, 1.0)
    assert u(0.3).tolist() == [-0.25, 2.0]
    assert u.left_value(0.3).tolist() == [0.5, -1.0]
    assert u(1.0).tolist() == [1.0, 0.0]
    assert u.integral() == pytest.approx([0.3 * 0.5 - 0.25 * 0.25 + 0.45, -0.3 + 0.5])
    r = u.refine([0.1, 0.3 + 1e-14])
    assert len(r.grid) == 5 and r(0.2).tolist() == [0.5, -1.0]
    t = u.truncate(0.4)
    assert t.grid.tolist() == [0.0, 0.3, 0.4] and t.cells == 2
    rep = u.replace(0.2, 0.35, [9.0, 9.0])
    assert rep(0.25).tolist() == [9.0, 9.0] and rep(0.36).tolist() == [-0.25, 2.0]
    assert rep(0.1).tolist() == [0.5, -1.0]


@pytest.mark.parametrize(
    "grid, values",
    [([0.5, 1.0], [[1.0]]), ([0.0, 1.0, 0.5], [[1.0], [2.0]]), ([0.0, 1.0], [[1.0], [2.0]]), ([0.0, 1.0], [[np.nan]])],
)
def test_control_signal_validation(grid, values):
    with pytest.raises((GridMismatchError, ValueError)):
        ControlSignal(grid, values)


def test_node_grid_aligns_breakpoints():
    grid = np.array([0.0, 0.3, 0.55, 1.0])
    times, step_cell, cell_start = node_grid(grid, 0.1)
    assert np.allclose(times[cell_start], grid)
    assert np.max(np.diff(times)) <= 0.1 + 1e-15
    assert step_cell.tolist() == [0] * 3 + [1] * 3 + [2] * 5
    assert default_step(grid) == pytest.approx(min(1e-3, 0.25 / 8))


# ---------------------------------------------------------- trajectories


def test_worked_example_trajectory(backend, worked, worked_u):
    tr = integrate(worked, worked_u)
    assert np.allclose(tr.final, 0.0, atol=1e-12)
    assert np.allclose(tr(0.25), [1.5, 0.0, 0.0])


def test_zero_horizon(worked):
    tr = integrate(worked, ControlSignal.constant([-2.0, 0.0], 0.0))
    assert tr.steps == 0 and tr.final.tolist() == [2.0, 0.0, 0.0]


def test_dimension_mismatch(worked):
    with pytest.raises(DimensionError):
        integrate(worked, ControlSignal.constant([1.0], 1.0))


def test_blow_up_is_reported():
    sys = ControlAffineSystem.from_strings(["x1^2"], [["0"]], initial=[1.0], horizon=2.0)
    with pytest.raises(BlowUpError) as info:
        integrate(sys, ControlSignal.constant([0.0], 2.0), step=1e-2)
    assert 0.9 < info.value.time <= 2.0


def _reference(sys, u, rtol=1e-12):
    x = np.array(sys.initial, dtype=float)
    for a, b, v in zip(u.grid[:-1], u.grid[1:], u.values):
        sol = solve_ivp(lambda t, y: sys.dynamics(y, v), (a, b), x, method="DOP853", rtol=rtol, atol=1e-13)
        x = sol.y[:, -1]
    return x


def test_matches_independent_ode_solver(backend, poly3, pw_control):
    tr = integrate(poly3, pw_control)
    assert np.allclose(tr.final, _reference(poly3, pw_control), atol=1e-11)


def test_step_halving_ratio(backend, poly3, pw_control):
    ref = _reference(poly3, pw_control)
    e1 = np.linalg.norm(integrate(poly3, pw_control, step=0.05).final - ref)
    e2 = np.linalg.norm(integrate(poly3, pw_control, step=0.025).final - ref)
    assert e1 / e2 >= 12.0


def test_dense_output(poly3, pw_control):
    tr = integrate(poly3, pw_control, step=1e-2)
    sub = pw_control.truncate(0.42)
    assert np.allclose(tr(0.42), _reference(poly3, sub), atol=1e-8)


def test_backends_agree(poly3, pw_control):
    from varlab import kernels

    if not kernels.compiled_available():
        pytest.skip("compiled kernels not built")
    prev = kernels.use("python")
    try:
        a = integrate(poly3, pw_control, step=0.01, jacobians=True)
    finally:
        kernels.use("compiled")
    b = integrate(poly3, pw_control, step=0.01, jacobians=True)
    kernels.use(prev)
    assert np.allclose(a.states, b.states, rtol=0, atol=1e-14)
    assert np.allclose(a.step_jacobians, b.step_jacobians, rtol=0, atol=1e-13)


# --------------------------------------------------- transport and adjoint


def test_worked_example_transport(backend, worked, worked_u):
    for t in (0.0, 0.25, 0.5, 0.8, 1.0):
        M = fundamental_matrix(worked, worked_u, None, t).value
        expect = np.eye(3)
        expect[2, 1] = 2 * (1 - t)
        assert np.allclose(M, expect, atol=1e-12)
    # a time that is not an integration node
    M = fundamental_matrix(worked, worked_u, None, 0.12345).value
    assert M[2, 1] == pytest.approx(2 * (1 - 0.12345), abs=1e-12)


def test_worked_example_adjoint(backend, worked, worked_u):
    p = adjoint_solve(worked, worked_u, None, [0.0, 0.0, -1.0])
    assert np.allclose(p.values[0], [0.0, -2.0, -1.0], atol=1e-12)
    assert np.allclose(p(0.5), [0.0, -1.0, -1.0], atol=1e-12)


def test_adjoint_variational_pairing(backend, poly3, pw_control):
    tr = integrate(poly3, pw_control, jacobians=True)
    p = adjoint_solve(poly3, pw_control, tr, [0.3, -1.0, 2.0]).values
    v = variational_solve(poly3, pw_control, tr, [1.0, 0.5, -0.2]).values
    prod = np.einsum("kn,kn->k", p, v)
    assert np.max(np.abs(prod - prod[0])) <= 1e-9 * abs(prod[0])


def test_adjoint_equals_terminal_times_transport(poly3, pw_control):
    tr = integrate(poly3, pw_control, jacobians=True)
    pT = np.array([0.3, -1.0, 2.0])
    p = adjoint_solve(poly3, pw_control, tr, pT)
    for t in (0.0, 0.3, 0.55, 0.7):
        assert np.allclose(p(t), pT @ fundamental_matrix(poly3, pw_control, tr, t).value, atol=1e-8)


def test_transport_matches_finite_difference(poly3, pw_control):
    tr = integrate(poly3, pw_control, jacobians=True)
    h = 1e-6
    M = fundamental_matrix(poly3, pw_control, tr, 0.0).value
    fd = np.column_stack([
        (integrate(poly3, pw_control, x0=poly3.initial + h * e).final
         - integrate(poly3, pw_control, x0=poly3.initial - h * e).final) / (2 * h)
        for e in np.eye(3)
    ])
    assert np.allclose(M, fd, atol=1e-8)


def test_variational_requires_node(poly3, pw_control):
    with pytest.raises(GridMismatchError):
        variational_solve(poly3, pw_control, None, [1, 0, 0], t0=0.12345)


# --------------------------------------------------------------- flows


def test_exp_flow_linear(backend):
    X = ExprField.from_strings(["x1", "-x2"])
    out = exp_flow(X, 0.7, [1.0, 2.0])
    assert np.allclose(out, [np.exp(0.7), 2 * np.exp(-0.7)], rtol=1e-12)
    back = exp_flow(X, -0.7, out)
    assert np.allclose(back, [1.0, 2.0], rtol=1e-12)


def test_integrate_coefficients_matches_integrate(poly3, pw_control):
    coef = np.hstack([np.ones((3, 1)), pw_control.values])
    a = integrate_coefficients(poly3, pw_control.grid, coef, poly3.initial)
    assert np.allclose(a, integrate(poly3, pw_control).final, atol=1e-14)


# ----------------------------------------------------- iterated integrals


def test_iterated_integrals_exact_fraction():
    grid = [Fraction(0), Fraction(1, 2), Fraction(1)]
    ii = iterated_integrals(grid, [[1, 1], [1, -1]])
    assert ii.A == (1, 0)
    assert ii.Aij[0][1] == Fraction(-1, 4)  # ∫ s a^1 = 1/8 - 3/8
    assert ii.Aij[1][0] == Fraction(1, 4)
    assert ii.Aij[0][1] + ii.Aij[1][0] == ii.A[0] * ii.A[1]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.floats(0.05, 1.0), st.floats(-2, 2), st.floats(-2, 2)), min_size=1, max_size=4))
def test_iterated_integrals_against_quadrature(cells):
    grid = np.concatenate([[0.0], np.cumsum([c[0] for c in cells])])
    vals = [[1.0, c[1], c[2]] for c in cells]
    ii = iterated_integrals(grid.tolist(), vals)

    def a(i, s):
        k = min(np.searchsorted(grid, s, side="right") - 1, len(vals) - 1)
        return vals[k][i]

    def A(i, s):
        return quad(lambda r: a(i, r), 0, s, points=grid[1:-1], limit=200)[0]

    T = grid[-1]
    for i, j in [(0, 1), (1, 2), (2, 1)]:
        ref = quad(lambda s: A(i, s) * a(j, s), 0, T, points=grid[1:-1], limit=200)[0]
        assert ii.Aij[i][j] == pytest.approx(ref, abs=1e-8)
    ref = quad(lambda s: A(1, s) * A(0, s) * a(1, s), 0, T, points=grid[1:-1], limit=200)[0]
    assert ii.Akij[1][0][1] == pytest.approx(ref, abs=1e-8)


def test_shuffle_identity():
    grid = [Fraction(0), Fraction(1, 3), Fraction(1)]
    ii = iterated_integrals(grid, [[1, 2, -1], [1, -1, 3]])
    for i in range(3):
        for j in range(3):
            assert ii.Aij[i][j] + ii.Aij[j][i] == ii.A[i] * ii.A[j]


def test_exp_product_order2_is_exact_on_nilpotent(worked):
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    vals = [[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, -1.0, 0.0], [1.0, 0.0, -1.0]]
    ii = iterated_integrals(grid, vals)
    direct = integrate_coefficients(worked, np.array(grid), np.array(vals), worked.initial)
    prod = exp_product_order2(worked, ii, worked.initial)
    assert np.allclose(direct, prod, atol=1e-12)
    assert direct[2] == pytest.approx(1 / 16)
