"""Vector fields, control-affine systems and Lie brackets.

Brackets use the convention ``[X, Y](x) = DY(x)·X(x) - DX(x)·Y(x)``. All
derivatives come from forward-mode duals on the expression tapes; nested
brackets are evaluated lazily rather than built symbolically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Sequence

import numpy as np

from varlab import kernels
from varlab.errors import DimensionError, SmoothnessError
from varlab.exprcore import Expr, Program, parse


class Grade(IntEnum):
    """Declared smoothness of a field."""

    C0 = 0
    C1 = 1
    C2 = 2
    C3 = 3

    @classmethod
    def coerce(cls, g) -> "Grade":
        if isinstance(g, str):
            try:
                return cls[g.upper()]
            except KeyError:
                raise ValueError(f"unknown smoothness grade {g!r}") from None
        return cls(int(g))


def _vec(x, n: int) -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise DimensionError(f"expected a vector of length {n}, got shape {a.shape}")
    return a


class VectorField:
    """Common interface: value, Jacobian-vector product, smoothness grade."""

    n: int
    grade: Grade

    def __call__(self, x) -> np.ndarray:
        raise NotImplementedError

    def jvp(self, x, v) -> np.ndarray:
        """Return ``DX(x)·v``."""
        raise NotImplementedError

    def second(self, x, a, b) -> np.ndarray:
        """Return ``D²X(x)[a, b]``."""
        raise SmoothnessError(f"{type(self).__name__} does not provide second derivatives")

    @property
    def is_polynomial(self) -> bool:
        return False

    def _require(self, grade: Grade, what: str) -> None:
        if self.grade < grade:
            raise SmoothnessError(f"{what} needs a {grade.name} field, declared {self.grade.name}")


class ExprField(VectorField):
    """Field whose components are parsed expressions."""

    def __init__(self, components: Sequence[Expr], grade=Grade.C2):
        comps = tuple(components)
        if not comps:
            raise DimensionError("a vector field needs at least one component")
        n = comps[0].n
        if len(comps) != n or any(c.n != n for c in comps):
            raise DimensionError(f"field has {len(comps)} components over n={n}")
        self.components = comps
        self.n = n
        self.grade = Grade.coerce(grade)

    @classmethod
    def from_strings(cls, texts: Sequence[str], grade=Grade.C2) -> "ExprField":
        n = len(texts)
        return cls([parse(t, n) for t in texts], grade)

    def __repr__(self) -> str:
        return f"ExprField({[str(c) for c in self.components]}, grade={self.grade.name})"

    @cached_property
    def program(self) -> Program:
        return Program.build(self.components, self.n)

    @property
    def is_polynomial(self) -> bool:
        return all(c.is_polynomial for c in self.components)

    def __call__(self, x) -> np.ndarray:
        return kernels.values(self.program, _vec(x, self.n))

    def dual2(self, x, v):
        """Return ``(X(x), DX(x)·v, D²X(x)[v, v])``."""
        return kernels.dual2(self.program, _vec(x, self.n), _vec(v, self.n))

    def jvp(self, x, v) -> np.ndarray:
        return self.dual2(x, v)[1]

    def jacobian(self, x) -> np.ndarray:
        return kernels.jacobian(self.program, _vec(x, self.n))

    def second(self, x, a, b) -> np.ndarray:
        # polarization of the quadratic form v -> D²X[v, v]
        a = _vec(a, self.n)
        b = _vec(b, self.n)
        qp = self.dual2(x, a + b)[2]
        qm = self.dual2(x, a - b)[2]
        return 0.25 * (qp - qm)


class BracketField(VectorField):
    """Lazy ``[X, Y]``. Its own Jacobian-vector product needs second derivatives of X and Y."""

    def __init__(self, X: VectorField, Y: VectorField):
        if X.n != Y.n:
            raise DimensionError(f"bracket of fields over n={X.n} and n={Y.n}")
        X._require(Grade.C1, "a Lie bracket")
        Y._require(Grade.C1, "a Lie bracket")
        self.X = X
        self.Y = Y
        self.n = X.n
        self.grade = Grade(min(X.grade, Y.grade) - 1)

    def __repr__(self) -> str:
        return f"[{self.X!r}, {self.Y!r}]"

    @property
    def is_polynomial(self) -> bool:
        return self.X.is_polynomial and self.Y.is_polynomial

    def __call__(self, x) -> np.ndarray:
        x = _vec(x, self.n)
        return self.Y.jvp(x, self.X(x)) - self.X.jvp(x, self.Y(x))

    def jvp(self, x, v) -> np.ndarray:
        self._require(Grade.C1, "differentiating a bracket")
        x = _vec(x, self.n)
        v = _vec(v, self.n)
        X, Y = self.X, self.Y
        return (
            Y.second(x, X(x), v)
            + Y.jvp(x, X.jvp(x, v))
            - X.second(x, Y(x), v)
            - X.jvp(x, Y.jvp(x, v))
        )


def lie_bracket(X: VectorField, Y: VectorField, x) -> np.ndarray:
    """Return ``[X, Y](x) = DY(x)·X(x) - DX(x)·Y(x)``."""
    return BracketField(X, Y)(x)


def ad_power(X: VectorField, Y: VectorField, k: int, x) -> np.ndarray:
    """Return ``ad_X^k(Y)(x)`` for ``k`` in 0, 1, 2."""
    if k == 0:
        return Y(_vec(x, Y.n))
    if k == 1:
        return lie_bracket(X, Y, x)
    if k == 2:
        X._require(Grade.C2, "ad^2")
        Y._require(Grade.C2, "ad^2")
        return BracketField(X, BracketField(X, Y))(x)
    raise ValueError(f"ad powers above 2 are not supported (got k={k})")


def nested_bracket_gfg(f: VectorField, g: VectorField, x) -> np.ndarray:
    """Return ``[g, [f, g]](x)``."""
    f._require(Grade.C2, "[g,[f,g]]")
    g._require(Grade.C2, "[g,[f,g]]")
    return BracketField(g, BracketField(f, g))(x)


@dataclass(frozen=True)
class ControlAffineSystem:
    """``x' = f(x) + sum_i g_i(x) u^i`` with cost ``Psi(x(T))``, start ``x̂`` and horizon ``T``."""

    drift: ExprField
    controlled: tuple
    cost: Expr
    initial: np.ndarray
    horizon: float
    n: int = field(init=False)
    m: int = field(init=False)

    def __post_init__(self):
        n = self.drift.n
        ctrl = tuple(self.controlled)
        if not ctrl:
            raise DimensionError("a control-affine system needs m >= 1")
        if any(g.n != n for g in ctrl):
            raise DimensionError("all fields must share the state dimension")
        if self.cost.n != n:
            raise DimensionError(f"cost declared for n={self.cost.n}, system has n={n}")
        x0 = np.array(self.initial, dtype=np.float64)
        if x0.shape != (n,):
            raise DimensionError(f"initial state must have length {n}")
        if not self.horizon >= 0.0:
            raise ValueError("horizon must be non-negative")
        x0.setflags(write=False)
        object.__setattr__(self, "controlled", ctrl)
        object.__setattr__(self, "initial", x0)
        object.__setattr__(self, "horizon", float(self.horizon))
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", len(ctrl))

    @classmethod
    def from_strings(
        cls,
        drift: Sequence[str],
        controlled: Sequence[Sequence[str]],
        cost: str = "0",
        initial=None,
        horizon: float = 1.0,
        grade=Grade.C2,
    ) -> "ControlAffineSystem":
        n = len(drift)
        f = ExprField.from_strings(drift, grade)
        gs = tuple(ExprField.from_strings(g, grade) for g in controlled)
        x0 = np.zeros(n) if initial is None else initial
        return cls(f, gs, parse(cost, n), x0, horizon)

    @property
    def fields(self) -> tuple:
        """``(f, g_1, ..., g_m)``; index 0 is the drift."""
        return (self.drift,) + self.controlled

    @property
    def grade(self) -> Grade:
        return min(F.grade for F in self.fields)

    @property
    def is_polynomial(self) -> bool:
        return all(F.is_polynomial for F in self.fields)

    @cached_property
    def program(self) -> Program:
        """Components of f, g_1, ..., g_m packed drift-first for the integrator."""
        comps = [c for F in self.fields for c in F.components]
        return Program.build(comps, self.n)

    def dynamics(self, x, u) -> np.ndarray:
        u = _vec(u, self.m)
        out = self.drift(x)
        for ui, g in zip(u, self.controlled):
            if ui != 0.0:
                out = out + ui * g(x)
        return out

    def jacobian(self, x, u) -> np.ndarray:
        """``∂/∂x (f + sum_i g_i u^i)`` at ``x``."""
        u = _vec(u, self.m)
        J = self.drift.jacobian(x)
        for ui, g in zip(u, self.controlled):
            if ui != 0.0:
                J = J + ui * g.jacobian(x)
        return J

    def closed_loop(self, u) -> VectorField:
        """The autonomous field ``f + sum_i g_i u^i`` for a constant control value."""
        return _AffineCombination(self.fields, np.concatenate([[1.0], _vec(u, self.m)]))


class _AffineCombination(VectorField):
    def __init__(self, fields, coef):
        self.fields = fields
        self.coef = np.asarray(coef, dtype=np.float64)
        self.n = fields[0].n
        self.grade = min(F.grade for F in fields)

    @property
    def is_polynomial(self) -> bool:
        return all(F.is_polynomial for F in self.fields)

    def _combine(self, evaluate):
        out = np.zeros(self.n)
        for F, c in zip(self.fields, self.coef):
            if c != 0.0:
                out += c * evaluate(F)
        return out

    def __call__(self, x):
        return self._combine(lambda F: F(x))

    def jvp(self, x, v):
        return self._combine(lambda F: F.jvp(x, v))

    def second(self, x, a, b):
        return self._combine(lambda F: F.second(x, a, b))
