"""Predicted versus measured first-order effects of control variations.

For a closed builder Γ on a window of width ``w`` ending at ``t̄`` the
endpoint displacement is, to first order in ``ε``,

* needle:      ``ε Σ_ℓ g_ℓ(x)(ū^ℓ - u^ℓ)``
* Goh, LC2:    ``ε (Σ_{h<k} Area(Γ^h, Γ^k)[g_h, g_k] - Σ_h (∫Γ^h)[F, g_h])``
* LC3:         ``ε ((Ǩ/2)[[f, g], g] - (∫sΓ(s)ds)[F, [F, g]])``

with ``x = x(t̄)``, ``F = f + Σ_k u^k(t̄) g_k`` and ``Ǩ = ∫(Γ¹)²``. Measured
displacements come from integrating the perturbed control and the nominal
control on the same step grid, so discretisation error cancels.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from varlab.controlset import ControlSetSpec
from varlab.errors import CancellationError, SmoothnessError, WindowError
from varlab.fields import BracketField, ControlAffineSystem, Grade
from varlab.flows import (
    ControlSignal,
    Trajectory,
    default_step,
    exp_product_first_order,
    exp_product_order2,
    exp_product_order3_m1,
    fundamental_matrix,
    integrate,
    integrate_coefficients,
    iterated_integrals,
)
from varlab.parallel import pmap
from varlab.variations import (
    LC2,
    LC3,
    BuilderParams,
    Goh,
    Needle,
    area,
    build_profile,
    first_moment,
    integral_gamma_primitive,
    lc3_energy,
    primitive,
    validate_signal,
    apply_variation,
    window_width,
)

DEFAULT_LADDER = tuple(1e-2 * 2.0**-k for k in range(6))
NOISE_FLOOR = 1e-11


# ------------------------------------------------------------------ predict


@dataclass(frozen=True, eq=False)
class PredictedVariation:
    """First-order displacement per unit ε: ``coefficient * direction + correction``.

    ``direction`` is the bracket named by the signal (``[g_i,g_j]``,
    ``[f,g_i]`` or ``[[f,g],g]``); ``correction`` collects the remaining
    first-order terms, which vanish in the textbook settings.
    """

    signal: object
    tbar: float
    direction: np.ndarray
    coefficient: float
    correction: np.ndarray
    label: str

    @property
    def vector(self) -> np.ndarray:
        return self.coefficient * self.direction + self.correction


def _sig_label(sig) -> str:
    if isinstance(sig, Needle):
        return "needle"
    if isinstance(sig, Goh):
        return f"[g{sig.i},g{sig.j}]"
    if isinstance(sig, LC2):
        return f"[f,g{sig.i}]"
    return "[[f,g],g]"


def predict(
    sys: ControlAffineSystem,
    u: ControlSignal,
    traj: Trajectory | None,
    sig,
    params: BuilderParams | None,
    tbar: float,
    reversed: bool = False,
    layout: str = "feasible",
) -> PredictedVariation:
    """Predicted displacement of ``x(t̄)`` per unit ε for the given variation."""
    validate_signal(sig, sys.m)
    if traj is None:
        traj = integrate(sys, u.truncate(tbar))
    x = traj(tbar)
    ubar = u.left_value(tbar)
    g = sys.controlled
    label = _sig_label(sig)
    if isinstance(sig, Needle):
        d = np.asarray(sig.value) - ubar
        direction = sum((dk * gk(x) for dk, gk in zip(d, g) if dk != 0.0), np.zeros(sys.n))
        return PredictedVariation(sig, tbar, direction, 1.0, np.zeros(sys.n), label)
    prim = primitive(build_profile(sig, params, sys.m, reversed, layout))
    F = sys.closed_loop(ubar)
    f = sys.drift
    if isinstance(sig, LC3):
        if sys.grade < Grade.C2:
            raise SmoothnessError("the LC3 expansion needs C2 fields")
        gg = g[0]
        fg = BracketField(f, gg)
        direction = BracketField(fg, gg)(x)
        coefficient = lc3_energy(prim) / 2.0
        correction = -first_moment(prim, 1) * BracketField(F, BracketField(F, gg))(x)
        return PredictedVariation(sig, tbar, direction, coefficient, correction, label)
    total = np.zeros(sys.n)
    for h in range(1, sys.m + 1):
        ih = integral_gamma_primitive(prim, h)
        if ih != 0.0:
            total -= ih * BracketField(F, g[h - 1])(x)
        for k in range(h + 1, sys.m + 1):
            a = area(prim, h, k)
            if a != 0.0:
                total += a * BracketField(g[h - 1], g[k - 1])(x)
    if isinstance(sig, Goh):
        direction = BracketField(g[sig.i - 1], g[sig.j - 1])(x)
        coefficient = area(prim, sig.i, sig.j)
    else:
        direction = BracketField(f, g[sig.i - 1])(x)
        coefficient = -integral_gamma_primitive(prim, sig.i)
    return PredictedVariation(sig, tbar, direction, coefficient, total - coefficient * direction, label)


# -------------------------------------------------------------------- measure


def slope_through_origin(eps: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Least-squares ``c`` in ``disp ≈ eps * c`` per component."""
    eps = np.asarray(eps, dtype=float)
    return (eps @ np.asarray(disp, dtype=float)) / float(eps @ eps)


def loglog_slope(xs, ys, floor: float = 0.0) -> float:
    """Least-squares slope of ``log y`` against ``log x``; +inf when every ``y`` is below ``floor``."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.all(ys <= floor):
        return math.inf
    keep = ys > 0.0
    if keep.sum() < 2:
        return math.inf
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


def angle_degrees(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return math.nan
    return math.degrees(math.acos(max(-1.0, min(1.0, float(a @ b) / (na * nb)))))


@dataclass(frozen=True, eq=False)
class LadderFit:
    """ε-ladder measurement of one variation against its prediction."""

    epsilons: np.ndarray
    displacements: np.ndarray
    prediction: PredictedVariation
    fitted: np.ndarray
    residuals: np.ndarray
    residual_order: float
    base: np.ndarray = field(repr=False)

    @property
    def fitted_coefficient(self) -> float:
        """Fitted vector minus the predicted correction, projected on the predicted direction."""
        d = self.prediction.direction
        nd = float(d @ d)
        if nd == 0.0:
            return math.nan
        return float((self.fitted - self.prediction.correction) @ d) / nd

    @property
    def relative_error(self) -> float:
        """``‖fitted - predicted‖ / ‖predicted‖`` of the full first-order vector."""
        p = self.prediction.vector
        return float(np.linalg.norm(self.fitted - p) / np.linalg.norm(p)) if np.any(p) else math.nan

    @property
    def angle(self) -> float:
        """Angle in degrees between fitted and predicted vectors."""
        return angle_degrees(self.fitted, self.prediction.vector)

    def rows(self) -> list:
        p = self.prediction.vector
        return [
            [e, *d.tolist(), *(e * p).tolist(), r]
            for e, d, r in zip(self.epsilons.tolist(), self.displacements, self.residuals.tolist())
        ]

    def to_csv(self) -> str:
        n = self.displacements.shape[1]
        header = ["epsilon"] + [f"d{i + 1}" for i in range(n)] + [f"pred{i + 1}" for i in range(n)] + ["residual"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in self.rows():
            w.writerow([f"{v:.17g}" for v in row])
        return buf.getvalue()

    def summary(self) -> str:
        return (
            f"signal {self.prediction.label} at t={self.prediction.tbar:.17g}: "
            f"predicted coefficient {self.prediction.coefficient:.17g}, "
            f"fitted coefficient {self.fitted_coefficient:.17g}, "
            f"relative error {self.relative_error:.3e}, angle {self.angle:.3e} deg, "
            f"residual order {self.residual_order:.3f}"
        )


def _displacement(sys, u, sig, params, tbar, eps, reversed, U, layout, step):
    pert = apply_variation(u, sig, params, tbar, eps, reversed, U, layout).truncate(tbar)
    nominal = u.refine(pert.grid).truncate(tbar)
    h = default_step(pert.grid) if step is None else step
    xe = integrate(sys, pert, step=h).final
    x0 = integrate(sys, nominal, step=h).final
    return xe - x0, x0


def measure(
    sys: ControlAffineSystem,
    u: ControlSignal,
    sig,
    params: BuilderParams | None,
    tbar: float,
    ladder=DEFAULT_LADDER,
    reversed: bool = False,
    U: ControlSetSpec | None = None,
    layout: str = "feasible",
    step: float | None = None,
    threads: int | None = None,
) -> LadderFit:
    """Run the ε-ladder: perturb, integrate to ``t̄``, fit slopes, compare with :func:`predict`."""
    eps = np.asarray(sorted(ladder, reverse=True), dtype=float)
    if len(eps) < 4 or np.any(np.diff(eps) >= 0) or eps[-1] <= 0:
        raise ValueError("ladder needs at least four distinct positive rungs")
    if window_width(sig, eps[0]) > tbar:
        raise WindowError(f"largest rung's window does not fit before t={tbar!r}")
    results = pmap(lambda e: _displacement(sys, u, sig, params, tbar, e, reversed, U, layout, step), eps, threads)
    disp = np.array([r[0] for r in results])
    pred = predict(sys, u, None, sig, params, tbar, reversed, layout)
    fitted = slope_through_origin(eps, disp)
    resid = np.linalg.norm(disp - np.outer(eps, pred.vector), axis=1)
    scale = NOISE_FLOOR * (1.0 + float(np.linalg.norm(results[0][1])))
    order = loglog_slope(eps, resid, floor=scale)
    return LadderFit(eps, disp, pred, fitted, resid, order, results[0][1])


@dataclass(frozen=True, eq=False)
class MultiMeasurement:
    """Joint effect of several disjoint variations at the horizon ``T``."""

    joint: np.ndarray
    singles: np.ndarray
    linear: np.ndarray
    transported: np.ndarray

    @property
    def additivity_error(self) -> float:
        """``‖joint - Σ singles‖ / ‖joint‖``."""
        return float(np.linalg.norm(self.joint - self.singles.sum(axis=0)) / np.linalg.norm(self.joint))

    @property
    def linear_error(self) -> float:
        """``‖joint - Σ ε_r Φ(T, t_r) v_r‖ / ‖joint‖``."""
        return float(np.linalg.norm(self.joint - self.linear) / np.linalg.norm(self.joint))


def measure_multi(
    sys: ControlAffineSystem,
    u: ControlSignal,
    variations,
    U: ControlSetSpec | None = None,
    layout: str = "feasible",
    step: float | None = None,
) -> MultiMeasurement:
    """Apply ``variations = [(sig, params, t̄, ε), ...]`` together and one at a time.

    Windows must be pairwise disjoint. Returns the joint endpoint
    displacement, the single ones, and the linear prediction
    ``Σ ε_r Φ(T, t_r) v_r``.
    """
    items = sorted(variations, key=lambda v: v[2])
    windows = [(t - window_width(s, e), t) for s, _, t, e in items]
    for (a0, b0), (a1, b1) in zip(windows, windows[1:]):
        if a1 < b0 - 1e-15:
            raise WindowError(f"variation windows [{a0:.6g},{b0:.6g}] and [{a1:.6g},{b1:.6g}] overlap")
    perturbed = []
    joint = u
    for sig, params, tbar, eps in items:
        one = apply_variation(u, sig, params, tbar, eps, False, U, layout)
        perturbed.append(one)
        joint = apply_variation(joint, sig, params, tbar, eps, False, U, layout)
    grid = np.unique(np.concatenate([joint.grid] + [p.grid for p in perturbed]))
    nominal = u.refine(grid)
    h = default_step(grid) if step is None else step
    base = integrate(sys, nominal, step=h, jacobians=True)
    xT = base.final
    dj = integrate(sys, joint.refine(grid), step=h).final - xT
    singles = np.array([integrate(sys, p.refine(grid), step=h).final - xT for p in perturbed])
    transported = []
    for sig, params, tbar, eps in items:
        v = predict(sys, u, base, sig, params, tbar, False, layout).vector
        transported.append(eps * fundamental_matrix(sys, nominal, base, tbar).value @ v)
    transported = np.array(transported)
    return MultiMeasurement(dj, singles, transported.sum(axis=0), transported)


# ------------------------------------------------------------ order checks


@dataclass(frozen=True, eq=False)
class OrderReport:
    """Errors (or displacements) on a t-ladder with their log-log slope."""

    ts: np.ndarray
    errors: np.ndarray
    slope: float
    fitted_coefficient: float = math.nan
    predicted_coefficient: float = math.nan
    angle: float = math.nan

    @property
    def coefficient_error(self) -> float:
        return abs(self.fitted_coefficient - self.predicted_coefficient) / abs(self.predicted_coefficient)


@dataclass(frozen=True, eq=False)
class Staircase:
    """Generic piecewise-constant inputs on ``[0, 1]``: ``values[c]`` on ``[breakpoints[c], breakpoints[c+1])``."""

    breakpoints: tuple
    values: tuple

    def grid(self) -> np.ndarray:
        return np.asarray(self.breakpoints, dtype=float)

    def array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=float)

    @classmethod
    def random(cls, m: int, cells: int = 5, seed: int = 0, scale: float = 1.0) -> "Staircase":
        rng = np.random.default_rng(seed)
        inner = np.sort(rng.uniform(0.05, 0.95, cells - 1))
        return cls(tuple([0.0, *inner.tolist(), 1.0]), tuple(map(tuple, rng.uniform(-scale, scale, (cells, m)))))


def scaled_profile_coefficients(profile, t: float, drift: float = 1.0):
    """Piecewise-constant ``a^0 = drift``, ``a^k(s) = γ^k(s/t)`` on ``[0, t]``: ``(grid, coef)``."""
    grid = profile.grid() * t
    gam = profile.array()
    coef = np.hstack([np.full((len(gam), 1), drift), gam])
    return grid, coef


def _exact_coefficients(profile, t, drift):
    from fractions import Fraction

    tt = Fraction(t)
    d = Fraction(drift)
    grid = [b * tt for b in profile.breakpoints]
    rows = [[d, *row] for row in profile.values]
    return iterated_integrals(grid, rows)


def drift_free_goh_errors(
    sys: ControlAffineSystem,
    sig: Goh,
    params: BuilderParams,
    ts=(0.2, 0.1, 0.05, 0.025),
    reversed: bool = False,
    layout: str = "feasible",
    x0=None,
    step: float | None = None,
    profile=None,
) -> OrderReport:
    """Drift-free Goh builder on ``[0, t]``: displacement ``≈ c t² [g_i, g_j](x0)`` with ``c = Area``.

    ``profile`` overrides the builder (any object with ``breakpoints`` and
    ``values``). Raises CancellationError if an iterated integral other than
    ``A^{i,j}`` and ``A^{j,i}`` fails to vanish exactly.
    """
    prof = build_profile(sig, params, sys.m, reversed, layout) if profile is None else profile
    ii = _exact_coefficients(prof, 1, 0)
    keep = {(sig.i, sig.j), (sig.j, sig.i)}
    if any(ii.A):
        raise CancellationError("first-order coefficients A^i do not vanish")
    for h in range(sys.m + 1):
        for k in range(sys.m + 1):
            if (h, k) not in keep and ii.Aij[h][k] != 0:
                raise CancellationError(f"A^({h},{k}) = {ii.Aij[h][k]} does not vanish")
    c = float(ii.Aij[sig.i][sig.j])
    x0 = sys.initial if x0 is None else np.asarray(x0, dtype=float)
    direction = BracketField(sys.controlled[sig.i - 1], sys.controlled[sig.j - 1])(x0)
    ts = np.asarray(ts, dtype=float)
    disp = []
    for t in ts:
        grid, coef = scaled_profile_coefficients(prof, t, drift=0.0)
        disp.append(integrate_coefficients(sys, grid, coef, x0, step) - x0)
    disp = np.array(disp)
    fitted = slope_through_origin(ts**2, disp)
    nd = float(direction @ direction)
    fc = float(fitted @ direction) / nd if nd else math.nan
    resid = np.linalg.norm(disp - np.outer(ts**2, c * direction), axis=1)
    return OrderReport(ts, resid, loglog_slope(ts, resid, NOISE_FLOOR * (1 + np.linalg.norm(x0))), fc, c,
                       angle_degrees(fitted, c * direction))


def sublinear_product_errors(sys: ControlAffineSystem, chi, ts=(0.2, 0.1, 0.05, 0.025), x0=None, cells: int = 16, step=None) -> OrderReport:
    """Sub-linear inputs ``b_i(s) = χ_i s_k`` (staircase, left endpoints) against ``e^{B^0 g_0}∘…∘e^{B^m g_m}``."""
    chi = np.asarray(chi, dtype=float)
    x0 = sys.initial if x0 is None else np.asarray(x0, dtype=float)
    errs = []
    for t in ts:
        grid = np.linspace(0.0, t, cells + 1)
        coef = np.outer(grid[:-1], chi)
        direct = integrate_coefficients(sys, grid, coef, x0, step)
        B = (np.diff(grid) @ coef)
        errs.append(np.linalg.norm(direct - exp_product_first_order(sys, B, x0, step or 1e-3)))
    return OrderReport(np.asarray(ts, dtype=float), np.array(errs), loglog_slope(ts, errs))


def product_errors(sys: ControlAffineSystem, profile, ts=(0.2, 0.1, 0.05, 0.025), order: int = 2, drift: float = 1.0,
                   x0=None, step=None) -> OrderReport:
    """Direct integration of ``a^0 = drift``, ``a^k = γ^k(s/t)`` versus the order-2 or order-3 exponential product."""
    x0 = sys.initial if x0 is None else np.asarray(x0, dtype=float)
    product = {2: exp_product_order2, 3: exp_product_order3_m1}[order]
    errs = []
    for t in ts:
        grid, coef = scaled_profile_coefficients(profile, t, drift)
        direct = integrate_coefficients(sys, grid, coef, x0, step)
        ii = iterated_integrals(grid.tolist(), coef.tolist())
        errs.append(np.linalg.norm(direct - product(sys, ii, x0, step or 1e-3)))
    return OrderReport(np.asarray(ts, dtype=float), np.array(errs), loglog_slope(ts, errs))
