"""Trajectories, exponential flows, transport matrices and exponential products.

Integration is classical fixed-step RK4 with every control breakpoint a node,
so no step straddles a discontinuity. Each control cell is split into equal
sub-steps no longer than the requested step ``h``.

Linearised quantities are the exact derivatives of the discrete RK4 map. The
adjoint recursion ``p_k = p_{k+1} Φ_k`` and the variational recursion
``v_{k+1} = Φ_k v_k`` share the per-step Jacobians ``Φ_k``, so ``p·v`` is
conserved to rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Sequence

import numpy as np

from varlab import kernels
from varlab.errors import BlowUpError, DimensionError, GridMismatchError
from varlab.fields import BracketField, ControlAffineSystem, ExprField, VectorField

_SNAP = 1e-12


# ----------------------------------------------------------------- controls


@dataclass(frozen=True, eq=False)
class ControlSignal:
    """Piecewise-constant control: ``values[k]`` holds on ``[grid[k], grid[k+1])``."""

    grid: np.ndarray
    values: np.ndarray
    certified: bool = False

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.float64).ravel()
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values.reshape(-1, 1) if len(grid) > 1 else values.reshape(0, -1)
        if len(grid) < 1 or grid[0] != 0.0:
            raise GridMismatchError("control grid must start at 0")
        if np.any(np.diff(grid) <= 0.0):
            raise GridMismatchError("control grid must be strictly increasing")
        if values.shape[0] != len(grid) - 1:
            raise GridMismatchError(f"{len(grid) - 1} cells but {values.shape[0]} control values")
        if not np.all(np.isfinite(values)):
            raise ValueError("control values must be finite")
        grid.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value, horizon: float) -> "ControlSignal":
        value = np.atleast_1d(np.asarray(value, dtype=np.float64))
        if horizon == 0.0:
            return cls(np.zeros(1), np.zeros((0, len(value))))
        return cls(np.array([0.0, float(horizon)]), value.reshape(1, -1))

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def horizon(self) -> float:
        return float(self.grid[-1])

    @property
    def cells(self) -> int:
        return self.values.shape[0]

    @property
    def min_width(self) -> float:
        return float(np.min(np.diff(self.grid))) if self.cells else 0.0

    def cell(self, t: float) -> int:
        """Index of the cell whose half-open interval contains ``t`` (the last cell at ``t = T``)."""
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        return min(max(k, 0), self.cells - 1)

    def left_cell(self, t: float) -> int:
        """Index of the cell just left of ``t``."""
        k = int(np.searchsorted(self.grid, t, side="left")) - 1
        return min(max(k, 0), self.cells - 1)

    def __call__(self, t: float) -> np.ndarray:
        return self.values[self.cell(t)].copy()

    def left_value(self, t: float) -> np.ndarray:
        return self.values[self.left_cell(t)].copy()

    def snap(self, t: float) -> float:
        """Return the breakpoint within rounding distance of ``t``, or ``t`` itself."""
        k = int(np.argmin(np.abs(self.grid - t)))
        return float(self.grid[k]) if abs(self.grid[k] - t) <= _SNAP * max(1.0, self.horizon) else float(t)

    def refine(self, points) -> "ControlSignal":
        """Insert breakpoints; values are unchanged as functions of time."""
        pts = [self.snap(float(p)) for p in np.atleast_1d(points)]
        pts = [p for p in pts if 0.0 < p < self.horizon]
        grid = np.unique(np.concatenate([self.grid, pts]))
        idx = np.searchsorted(self.grid, grid[:-1], side="right") - 1
        return ControlSignal(grid, self.values[idx])

    def replace(self, a: float, b: float, value) -> "ControlSignal":
        """Set the control to ``value`` on ``[a, b)``."""
        out = self.refine([a, b])
        a, b = out.snap(a), out.snap(b)
        vals = out.values.copy()
        mask = (out.grid[:-1] >= a) & (out.grid[1:] <= b)
        vals[mask] = value
        return ControlSignal(out.grid, vals)

    def truncate(self, t: float) -> "ControlSignal":
        """Restriction to ``[0, t]``."""
        if t <= 0.0:
            return ControlSignal(np.zeros(1), np.zeros((0, self.m)))
        out = self.refine([t])
        t = out.snap(t)
        keep = int(np.searchsorted(out.grid, t, side="left"))
        return ControlSignal(out.grid[: keep + 1], out.values[:keep], self.certified)

    def integral(self) -> np.ndarray:
        return np.diff(self.grid) @ self.values if self.cells else np.zeros(self.m)

    def with_certificate(self) -> "ControlSignal":
        return ControlSignal(self.grid, self.values, True)


# --------------------------------------------------------------- trajectory


def default_step(grid: np.ndarray) -> float:
    """``min(1e-3·T, Δ/8)`` with Δ the narrowest cell."""
    T = float(grid[-1])
    widths = np.diff(grid)
    return min(1e-3 * T, float(widths.min()) / 8.0) if len(widths) else 0.0


def node_grid(grid: np.ndarray, h: float):
    """Split every cell of ``grid`` into equal sub-steps of length at most ``h``.

    Returns ``(times, step_cell, cell_start)`` where ``cell_start[k]`` is the
    node index of ``grid[k]``.
    """
    widths = np.diff(grid)
    counts = np.maximum(1, np.ceil(widths / h * (1.0 - 1e-12)).astype(np.int64))
    cell_start = np.concatenate([[0], np.cumsum(counts)])
    times = np.empty(cell_start[-1] + 1)
    for k, (a, b, c) in enumerate(zip(grid[:-1], grid[1:], counts)):
        times[cell_start[k] : cell_start[k] + c] = a + (b - a) * np.arange(c) / c
    times[-1] = grid[-1]
    step_cell = np.repeat(np.arange(len(widths), dtype=np.int32), counts)
    return times, step_cell, cell_start


@dataclass(frozen=True, eq=False)
class Trajectory:
    """RK4 samples with cubic Hermite dense output.

    ``dstart[k]`` and ``dend[k]`` are the one-sided derivatives at the two ends
    of step ``k`` (they differ across control breakpoints).
    """

    times: np.ndarray
    states: np.ndarray
    dstart: np.ndarray
    dend: np.ndarray
    step_cell: np.ndarray
    cell_start: np.ndarray
    control: ControlSignal
    step_jacobians: np.ndarray | None = field(default=None, repr=False)

    @property
    def initial(self) -> np.ndarray:
        return self.states[0]

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def __call__(self, t):
        if np.ndim(t) > 0:
            return np.array([self(s) for s in np.asarray(t).ravel()])
        if self.steps == 0:
            return self.states[0].copy()
        k = int(np.searchsorted(self.times, t, side="right")) - 1
        k = min(max(k, 0), self.steps - 1)
        t0, t1 = self.times[k], self.times[k + 1]
        h = t1 - t0
        th = (t - t0) / h
        h00 = (1 + 2 * th) * (1 - th) ** 2
        h10 = th * (1 - th) ** 2
        h01 = th * th * (3 - 2 * th)
        h11 = th * th * (th - 1)
        return (
            h00 * self.states[k]
            + h10 * h * self.dstart[k]
            + h01 * self.states[k + 1]
            + h11 * h * self.dend[k]
        )

    def node(self, t: float) -> int:
        """Index of the sample at time ``t``; ``t`` must be a node."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > _SNAP * max(1.0, self.times[-1]):
            raise GridMismatchError(f"t={t!r} is not an integration node")
        return k

    @cached_property
    def transport(self) -> np.ndarray:
        """``transport[k] = Φ(T, t_k)``, the map from variations at ``t_k`` to variations at ``T``."""
        if self.step_jacobians is None:
            raise GridMismatchError("trajectory was integrated without step Jacobians")
        n = self.states.shape[1]
        out = np.empty((self.steps + 1, n, n))
        out[-1] = np.eye(n)
        for k in range(self.steps - 1, -1, -1):
            out[k] = out[k + 1] @ self.step_jacobians[k]
        return out


def integrate(
    sys: ControlAffineSystem,
    u: ControlSignal,
    step: float | None = None,
    jacobians: bool = False,
    x0=None,
) -> Trajectory:
    """Integrate ``x' = f(x) + sum_i g_i(x) u^i(t)`` on ``[0, T]`` with ``T`` the control horizon."""
    if u.m != sys.m:
        raise DimensionError(f"control has m={u.m}, system has m={sys.m}")
    x0 = sys.initial if x0 is None else np.asarray(x0, dtype=np.float64)
    n = sys.n
    if u.cells == 0:
        empty = np.zeros((0, n))
        return Trajectory(
            np.zeros(1), x0.reshape(1, n).copy(), empty, empty, np.zeros(0, np.int32),
            np.zeros(1, np.int64), u, np.zeros((0, n, n)) if jacobians else None,
        )
    h = default_step(u.grid) if step is None else float(step)
    if not h > 0.0:
        raise ValueError("step must be positive")
    times, step_cell, cell_start = node_grid(u.grid, h)
    coef = np.hstack([np.ones((u.cells, 1)), u.values])
    states, dstart, dend, jac = kernels.rk4_affine(sys.program, sys.m, x0, times, step_cell, coef, jacobians)
    return Trajectory(times, states, dstart, dend, step_cell, cell_start, u, jac)


def integrate_coefficients(sys: ControlAffineSystem, grid, coef, x0, step: float | None = None) -> np.ndarray:
    """Endpoint of ``x' = sum_k a^k(t) F_k(x)`` with ``F_0 = f`` and piecewise-constant ``a`` (cells × (m+1))."""
    grid = np.asarray(grid, dtype=np.float64)
    coef = np.asarray(coef, dtype=np.float64)
    if coef.shape != (len(grid) - 1, sys.m + 1):
        raise DimensionError(f"coefficients must have shape ({len(grid) - 1}, {sys.m + 1})")
    h = default_step(grid) if step is None else float(step)
    times, step_cell, _ = node_grid(grid, h)
    states = kernels.rk4_affine(sys.program, sys.m, x0, times, step_cell, coef)[0]
    return states[-1]


# -------------------------------------------------------------------- flows


def _rk4_field(X: VectorField, tau: float, x: np.ndarray, nsteps: int) -> np.ndarray:
    h = tau / nsteps
    y = x.copy()
    for _ in range(nsteps):
        k1 = X(y)
        k2 = X(y + 0.5 * h * k1)
        k3 = X(y + 0.5 * h * k2)
        k4 = X(y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise BlowUpError(float(tau))
    return y


def exp_flow(X: VectorField, tau: float, x, step: float = 1e-3) -> np.ndarray:
    """``e^{tau X}(x)``: the autonomous flow of X for time ``tau`` (negative runs backwards)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (X.n,):
        raise DimensionError(f"expected a point of length {X.n}")
    if tau == 0.0:
        return x.copy()
    nsteps = max(1, math.ceil(abs(tau) / step))
    if isinstance(X, ExprField):
        times = np.linspace(0.0, tau, nsteps + 1)
        cells = np.zeros(nsteps, dtype=np.int32)
        return kernels.rk4_affine(X.program, 0, x, times, cells, np.ones((1, 1)))[0][-1]
    return _rk4_field(X, tau, x, nsteps)


# ---------------------------------------------------- transport and adjoint


@dataclass(frozen=True)
class FundamentalMatrix:
    """``value = Φ(T, t)``: maps a variation at time ``t`` to the induced variation at ``T``."""

    t: float
    value: np.ndarray


def _with_jacobians(sys, u, traj):
    if traj is None:
        return integrate(sys, u, jacobians=True)
    if traj.control is not u and not (
        np.array_equal(traj.control.grid, u.grid) and np.array_equal(traj.control.values, u.values)
    ):
        raise GridMismatchError("trajectory was computed for a different control")
    if traj.step_jacobians is None:
        h = float(np.max(np.diff(traj.times))) if traj.steps else None
        again = integrate(sys, u, step=h, jacobians=True, x0=traj.initial)
        if not np.array_equal(again.times, traj.times):
            raise GridMismatchError("could not reproduce the trajectory's step grid")
        return again
    return traj


def fundamental_matrix(sys: ControlAffineSystem, u: ControlSignal, traj: Trajectory | None, t: float) -> FundamentalMatrix:
    traj = _with_jacobians(sys, u, traj)
    T = traj.times[-1]
    if not 0.0 <= t <= T:
        raise GridMismatchError(f"t={t!r} outside [0, {T!r}]")
    k = int(np.searchsorted(traj.times, t, side="right")) - 1
    k = min(k, traj.steps)
    if abs(traj.times[k] - t) <= _SNAP * max(1.0, T):
        return FundamentalMatrix(float(t), traj.transport[k].copy())
    # partial step from t to the next node
    coef = np.concatenate([[1.0], u.values[traj.step_cell[k]]]).reshape(1, -1)
    jac = kernels.rk4_affine(
        sys.program, sys.m, traj(t), np.array([t, traj.times[k + 1]]), np.zeros(1, np.int32), coef, True
    )[3][0]
    return FundamentalMatrix(float(t), traj.transport[k + 1] @ jac)


@dataclass(frozen=True, eq=False)
class CovectorPath:
    """Row covectors sampled on a trajectory's nodes, linear in between."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        return np.array([np.interp(t, self.times, self.values[:, i]) for i in range(self.values.shape[1])]).T


def adjoint_solve(sys: ControlAffineSystem, u: ControlSignal, traj: Trajectory | None, pT) -> CovectorPath:
    """Backward adjoint ``p' = -p ∂_x(f + sum g_i u^i)`` from ``p(T) = pT``; ``p(t) = pT·Φ(T, t)``."""
    traj = _with_jacobians(sys, u, traj)
    pT = np.asarray(pT, dtype=np.float64)
    if pT.shape != (sys.n,):
        raise DimensionError(f"terminal covector must have length {sys.n}")
    p = np.empty((traj.steps + 1, sys.n))
    p[-1] = pT
    for k in range(traj.steps - 1, -1, -1):
        p[k] = p[k + 1] @ traj.step_jacobians[k]
    if not np.all(np.isfinite(p)):
        raise BlowUpError(float(traj.times[int(np.argmax(~np.isfinite(p).all(axis=1)))]))
    return CovectorPath(traj.times, p)


def variational_solve(sys: ControlAffineSystem, u: ControlSignal, traj: Trajectory | None, v0, t0: float = 0.0) -> CovectorPath:
    """Forward variational equation from ``v(t0) = v0`` (``t0`` a node); samples before ``t0`` are NaN."""
    traj = _with_jacobians(sys, u, traj)
    k0 = traj.node(t0)
    v = np.full((traj.steps + 1, sys.n), np.nan)
    v[k0] = np.asarray(v0, dtype=np.float64)
    for k in range(k0, traj.steps):
        v[k + 1] = traj.step_jacobians[k] @ v[k]
    return CovectorPath(traj.times, v)


# -------------------------------------------------------- iterated integrals


@dataclass(frozen=True, eq=False)
class IteratedIntegrals:
    """``A[i] = ∫a^i``, ``Aij[i, j] = ∫A^i a^j``, ``Akij[k, i, j] = ∫A^k A^i a^j`` at time ``t``.

    Index 0 refers to the drift coefficient ``a^0``. Entries are Python
    numbers (Fractions when the inputs are exact).
    """

    t: object
    A: tuple
    Aij: tuple
    Akij: tuple

    @property
    def size(self) -> int:
        return len(self.A)

    def as_arrays(self):
        return (
            np.array(self.A, dtype=float),
            np.array(self.Aij, dtype=float),
            np.array(self.Akij, dtype=float),
        )


def iterated_integrals(grid: Sequence, values: Sequence[Sequence]) -> IteratedIntegrals:
    """Exact iterated integrals of piecewise-constant ``a^0..a^m``.

    ``values[c][i]`` is ``a^i`` on ``[grid[c], grid[c+1])``. Piecewise
    polynomial integrands are integrated in closed form, so the result is
    exact in whatever number type the inputs carry.
    """
    grid = list(grid)
    rows = [list(r) for r in values]
    if len(rows) != len(grid) - 1:
        raise DimensionError(f"{len(grid) - 1} cells but {len(rows)} coefficient rows")
    size = len(rows[0]) if rows else 0
    rng = range(size)
    A = [0] * size
    Aij = [[0] * size for _ in rng]
    Akij = [[[0] * size for _ in rng] for _ in rng]
    half, third = Fraction(1, 2), Fraction(1, 3)
    for c, a in enumerate(rows):
        w = grid[c + 1] - grid[c]
        if isinstance(w, float):
            half, third = 0.5, 1.0 / 3.0
        w2, w3 = w * w, w * w * w
        for k in rng:
            for i in rng:
                base = A[k] * A[i] * w + (A[k] * a[i] + a[k] * A[i]) * w2 * half + a[k] * a[i] * w3 * third
                for j in rng:
                    if a[j]:
                        Akij[k][i][j] += a[j] * base
        for i in rng:
            lin = A[i] * w + a[i] * w2 * half
            for j in rng:
                if a[j]:
                    Aij[i][j] += a[j] * lin
        for i in rng:
            A[i] += a[i] * w
    return IteratedIntegrals(
        grid[-1] - grid[0] if grid else 0,
        tuple(A),
        tuple(tuple(r) for r in Aij),
        tuple(tuple(tuple(r) for r in blk) for blk in Akij),
    )


# ------------------------------------------------------ exponential products


def _compose(factors, x0, step):
    """Apply ``factors = [(tau, X), ...]`` right to left, i.e. last entry first."""
    x = np.asarray(x0, dtype=np.float64)
    for tau, X in reversed(factors):
        if tau != 0.0:
            x = exp_flow(X, float(tau), x, step)
    return x


def exp_product_order2(sys: ControlAffineSystem, coeffs: IteratedIntegrals, x0, step: float = 1e-3) -> np.ndarray:
    """``e^{A^0 g_0}∘…∘e^{A^m g_m}∘e^{A^{0,1}[g_0,g_1]}∘…∘e^{A^{m-1,m}[g_{m-1},g_m]}(x0)``.

    ``g_0`` is the drift. Composition reads right to left: the bracket
    factors act first, then ``g_m``, down to ``g_0``. This ordering makes the
    product agree with the true endpoint up to third-order terms.
    """
    if coeffs.size != sys.m + 1:
        raise DimensionError(f"need coefficients for {sys.m + 1} fields, got {coeffs.size}")
    A, Aij, _ = coeffs.as_arrays()
    F = sys.fields
    factors = [(A[i], F[i]) for i in range(sys.m + 1)]
    for h in range(sys.m + 1):
        for k in range(h + 1, sys.m + 1):
            if Aij[h, k] != 0.0:
                factors.append((Aij[h, k], BracketField(F[h], F[k])))
    return _compose(factors, x0, step)


def exp_product_order3_m1(sys: ControlAffineSystem, coeffs: IteratedIntegrals, x0, step: float = 1e-3) -> np.ndarray:
    """``e^{A^0 f}∘e^{A^1 g}∘e^{A^{0,1}[f,g]}∘e^{A^{0,0,1}[f,[f,g]]}∘e^{A^{1,0,1}[g,[f,g]]}(x0)`` for ``m = 1``."""
    if sys.m != 1:
        raise DimensionError("the third-order product is defined for single-input systems")
    A, Aij, Akij = coeffs.as_arrays()
    f, g = sys.drift, sys.controlled[0]
    fg = BracketField(f, g)
    factors = [
        (A[0], f),
        (A[1], g),
        (Aij[0, 1], fg),
        (Akij[0, 0, 1], BracketField(f, fg)),
        (Akij[1, 0, 1], BracketField(g, fg)),
    ]
    return _compose(factors, x0, step)


def exp_product_first_order(sys: ControlAffineSystem, B, x0, step: float = 1e-3) -> np.ndarray:
    """``e^{B^0 g_0}∘…∘e^{B^m g_m}(x0)`` with ``B^i = ∫b_i``."""
    return _compose(list(zip(np.asarray(B, dtype=float), sys.fields)), x0, step)
