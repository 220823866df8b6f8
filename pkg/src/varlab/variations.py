"""Variation signals, builders γ, primitives Γ and perturbed controls.

Builder breakpoints and values are kept as exact rationals of the (α, β)
parameters and converted to floats only when a control is assembled, so the
closure, area and integral identities hold exactly.

Signals use 1-based control indices, matching the field names ``g1..gm``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

import numpy as np

from varlab.controlset import ControlSetSpec
from varlab.errors import CertificationError, DimensionError, WindowError
from varlab.flows import ControlSignal

# ------------------------------------------------------------------ signals


@dataclass(frozen=True)
class Needle:
    value: tuple

    def __post_init__(self):
        object.__setattr__(self, "value", tuple(float(v) for v in self.value))

    @property
    def indices(self) -> tuple:
        return ()


@dataclass(frozen=True)
class Goh:
    i: int
    j: int

    @property
    def indices(self) -> tuple:
        return (self.i, self.j)


@dataclass(frozen=True)
class LC2:
    i: int

    @property
    def indices(self) -> tuple:
        return (self.i,)


@dataclass(frozen=True)
class LC3:
    @property
    def indices(self) -> tuple:
        return (1,)


def validate_signal(sig, m: int) -> None:
    if isinstance(sig, Needle):
        if len(sig.value) != m:
            raise DimensionError(f"needle value has {len(sig.value)} components, m={m}")
    elif isinstance(sig, Goh):
        if not 1 <= sig.i < sig.j <= m:
            raise ValueError(f"Goh signal needs 1 <= i < j <= m, got ({sig.i},{sig.j}) with m={m}")
    elif isinstance(sig, LC2):
        if not 1 <= sig.i <= m:
            raise ValueError(f"LC2 index {sig.i} out of range for m={m}")
    elif isinstance(sig, LC3):
        if m != 1:
            raise ValueError("the LC3 signal needs a single-input system")
    else:
        raise TypeError(f"not a variation signal: {sig!r}")


def window_width(sig, eps: float) -> float:
    """Width of the perturbation window: ε, √ε or ∛ε."""
    if isinstance(sig, Needle):
        return float(eps)
    if isinstance(sig, LC3):
        return float(np.cbrt(eps))
    return math.sqrt(eps)


# ------------------------------------------------------------------- params


def _exact(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(x)


@dataclass(frozen=True)
class BuilderParams:
    """Positive shift sizes ``alpha[r]`` (upwards) and ``beta[r]`` (downwards) per 1-based index ``r``."""

    alpha: Mapping[int, Fraction]
    beta: Mapping[int, Fraction]

    def __post_init__(self):
        alpha = {int(k): _exact(v) for k, v in dict(self.alpha).items()}
        beta = {int(k): _exact(v) for k, v in dict(self.beta).items()}
        for name, table in (("alpha", alpha), ("beta", beta)):
            for k, v in table.items():
                if not v > 0:
                    raise ValueError(f"{name}[{k}] must be positive, got {float(v)!r}")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def uniform(cls, alpha, beta, indices) -> "BuilderParams":
        return cls({i: alpha for i in indices}, {i: beta for i in indices})

    def covers(self, indices) -> bool:
        return all(i in self.alpha and i in self.beta for i in indices)

    def merged(self, other: "BuilderParams") -> "BuilderParams":
        return BuilderParams({**self.alpha, **other.alpha}, {**self.beta, **other.beta})

    def scaled(self, c) -> "BuilderParams":
        c = _exact(c)
        return BuilderParams({k: v * c for k, v in self.alpha.items()}, {k: v * c for k, v in self.beta.items()})

    def swapped(self) -> "BuilderParams":
        return BuilderParams(self.beta, self.alpha)

    def as_floats(self) -> dict:
        return {
            "alpha": {k: float(v) for k, v in sorted(self.alpha.items())},
            "beta": {k: float(v) for k, v in sorted(self.beta.items())},
        }


def goh_r(params: BuilderParams, i: int, j: int) -> Fraction:
    """``r = 1/α^i + 1/α^j + 1/β^i + 1/β^j``."""
    a, b = params.alpha, params.beta
    return 1 / a[i] + 1 / a[j] + 1 / b[i] + 1 / b[j]


# ------------------------------------------------------------------ profile


@dataclass(frozen=True)
class GammaProfile:
    """Piecewise-constant ``γ`` on [0, 1]: ``values[c]`` on ``[breakpoints[c], breakpoints[c+1])``.

    ``values`` are m-tuples of Fractions indexed by control component (0-based).
    """

    breakpoints: tuple
    values: tuple
    signal: object
    params: BuilderParams
    reversed: bool = False
    layout: str = "feasible"

    @property
    def m(self) -> int:
        return len(self.values[0])

    def scaled(self, c) -> "GammaProfile":
        c = _exact(c)
        vals = tuple(tuple(c * v for v in row) for row in self.values)
        return GammaProfile(self.breakpoints, vals, self.signal, self.params, self.reversed, self.layout)

    def refined(self, points) -> "GammaProfile":
        """Same function on a finer partition."""
        bps = sorted(set(self.breakpoints) | {_exact(p) for p in points if 0 < p < 1})
        vals = []
        for a in bps[:-1]:
            c = max(k for k, b in enumerate(self.breakpoints[:-1]) if b <= a)
            vals.append(self.values[c])
        return GammaProfile(tuple(bps), tuple(vals), self.signal, self.params, self.reversed, self.layout)

    def grid(self) -> np.ndarray:
        return np.array([float(b) for b in self.breakpoints])

    def array(self) -> np.ndarray:
        return np.array([[float(v) for v in row] for row in self.values])


def _axis(m: int, r: int, v: Fraction) -> tuple:
    row = [Fraction(0)] * m
    row[r - 1] = v
    return tuple(row)


LAYOUTS = ("feasible", "antisymmetric")


def build_profile(sig, params: BuilderParams, m: int, reversed: bool = False, layout: str = "feasible") -> GammaProfile:
    """The builder ``γ`` of a Goh, LC2 or LC3 signal.

    Goh builders come in two layouts sharing the first half
    ``(+α^i e_i, +α^j e_j, -β^i e_i, -β^j e_j)``. ``"antisymmetric"`` continues
    with ``-γ̂(s - 1/2)``, which needs the shifts ``-α`` and ``+β`` as well;
    ``"feasible"`` continues with ``(-β^i e_i, -β^j e_j, +α^i e_i, +α^j e_j)``
    so only the balanced shifts ``+α`` and ``-β`` occur. Both trace two equal
    squares of side ``1/(2r)``. They coincide when ``α = β``.

    ``reversed`` runs the builder backwards in time: ``γ̌(s) = -γ(1-s)`` for the
    antisymmetric layout (so ``Γ̌(s) = Γ(1-s)``) and ``γ̌(s) = γ(1-s)`` otherwise
    (so ``Γ̌(s) = -Γ(1-s)``), which keeps every value admissible.
    """
    validate_signal(sig, m)
    if isinstance(sig, Needle):
        raise TypeError("needle variations have no builder profile")
    if layout not in LAYOUTS:
        raise ValueError(f"unknown layout {layout!r}")
    if not params.covers(sig.indices):
        raise ValueError(f"params must give alpha and beta for indices {sig.indices}")
    a, b = params.alpha, params.beta
    negate_on_reverse = False
    if isinstance(sig, Goh):
        i, j = sig.i, sig.j
        two_r = 2 * goh_r(params, i, j)
        half = [(1 / a[i], _axis(m, i, a[i])), (1 / a[j], _axis(m, j, a[j])),
                (1 / b[i], _axis(m, i, -b[i])), (1 / b[j], _axis(m, j, -b[j]))]
        if layout == "antisymmetric":
            second = [(w, tuple(-v for v in val)) for w, val in half]
            negate_on_reverse = True
        else:
            second = [(1 / b[i], _axis(m, i, -b[i])), (1 / b[j], _axis(m, j, -b[j])),
                      (1 / a[i], _axis(m, i, a[i])), (1 / a[j], _axis(m, j, a[j]))]
        pieces = half + second
        widths = [w / two_r for w, _ in pieces]
        values = [val for _, val in pieces]
    elif isinstance(sig, LC2):
        i = sig.i
        tau = a[i] / (a[i] + b[i])
        widths = [tau, 1 - tau]
        values = [_axis(m, i, -b[i]), _axis(m, i, a[i])]
    else:
        t1 = a[1] / (2 * (a[1] + b[1]))
        widths = [t1, 1 - 2 * t1, t1]
        values = [_axis(m, 1, -b[1]), _axis(m, 1, a[1]), _axis(m, 1, -b[1])]
    if reversed:
        widths = widths[::-1]
        values = values[::-1]
        if negate_on_reverse:
            values = [tuple(-v for v in val) for val in values]
    bps = [Fraction(0)]
    for w in widths:
        bps.append(bps[-1] + w)
    if bps[-1] != 1:
        raise ArithmeticError(f"builder grid ends at {bps[-1]}, expected 1")
    return GammaProfile(tuple(bps), tuple(values), sig, params, reversed, layout)


# ---------------------------------------------------------------- primitive


@dataclass(frozen=True)
class GammaPrimitive:
    """Continuous piecewise-linear ``Γ(s) = ∫_0^s γ``; ``nodes[c]`` is ``Γ(breakpoints[c])``."""

    breakpoints: tuple
    nodes: tuple
    profile: GammaProfile

    @property
    def m(self) -> int:
        return len(self.nodes[0])

    @property
    def closed(self) -> bool:
        return all(v == 0 for v in self.nodes[0]) and all(v == 0 for v in self.nodes[-1])

    def __call__(self, s: float, exact: bool = False):
        s = _exact(s) if exact else float(s)
        bps = self.breakpoints
        c = 0
        while c < len(bps) - 2 and bps[c + 1] <= s:
            c += 1
        lo, hi = bps[c], bps[c + 1]
        th = (s - lo) / (hi - lo) if exact else (s - float(lo)) / float(hi - lo)
        out = [a + (b - a) * th for a, b in zip(self.nodes[c], self.nodes[c + 1])]
        return tuple(out) if exact else np.array([float(v) for v in out])


def primitive(profile: GammaProfile) -> GammaPrimitive:
    nodes = [tuple(Fraction(0) for _ in range(profile.m))]
    bps = profile.breakpoints
    for c, row in enumerate(profile.values):
        w = bps[c + 1] - bps[c]
        nodes.append(tuple(n + w * v for n, v in zip(nodes[-1], row)))
    prim = GammaPrimitive(bps, tuple(nodes), profile)
    if not prim.closed:
        raise ArithmeticError("builder primitive does not return to zero")
    if isinstance(profile.signal, LC3) and integral_gamma_primitive(prim, 1, exact=True) != 0:
        raise ArithmeticError("LC3 primitive must have zero mean")
    return prim


def _comp(prim: GammaPrimitive, h: int) -> int:
    if not 1 <= h <= prim.m:
        raise ValueError(f"component {h} out of range 1..{prim.m}")
    return h - 1


def _out(x: Fraction, exact: bool):
    return x if exact else float(x)


def area(prim: GammaPrimitive, h: int, k: int, exact: bool = False):
    """``∫_0^1 Γ^h(s) dΓ^k(s)`` for a closed primitive."""
    if not prim.closed:
        raise ValueError("area needs a closed curve")
    h, k = _comp(prim, h), _comp(prim, k)
    bps, N, vals = prim.breakpoints, prim.nodes, prim.profile.values
    total = Fraction(0)
    for c in range(len(bps) - 1):
        g = vals[c][k]
        if g:
            total += g * (bps[c + 1] - bps[c]) * (N[c][h] + N[c + 1][h]) / 2
    return _out(total, exact)


def integral_gamma_primitive(prim: GammaPrimitive, h: int, exact: bool = False):
    """``∫_0^1 Γ^h(s) ds``."""
    h = _comp(prim, h)
    bps, N = prim.breakpoints, prim.nodes
    total = sum(((bps[c + 1] - bps[c]) * (N[c][h] + N[c + 1][h]) / 2 for c in range(len(bps) - 1)), Fraction(0))
    return _out(total, exact)


def first_moment(prim: GammaPrimitive, h: int, exact: bool = False):
    """``∫_0^1 s Γ^h(s) ds``."""
    h = _comp(prim, h)
    bps, N = prim.breakpoints, prim.nodes
    total = Fraction(0)
    for c in range(len(bps) - 1):
        s0, s1 = bps[c], bps[c + 1]
        a, b = N[c][h], N[c + 1][h]
        # Simpson's rule is exact for the quadratic s·Γ(s)
        total += (s1 - s0) / 6 * (s0 * a + 2 * (s0 + s1) * (a + b) / 2 + s1 * b)
    return _out(total, exact)


def lc3_energy(prim: GammaPrimitive, exact: bool = False):
    """``∫_0^1 (Γ^1(s))² ds`` of an LC3 primitive."""
    if not isinstance(prim.profile.signal, LC3):
        raise TypeError("lc3_energy needs an LC3 primitive")
    bps, N = prim.breakpoints, prim.nodes
    total = Fraction(0)
    for c in range(len(bps) - 1):
        a, b = N[c][0], N[c + 1][0]
        total += (bps[c + 1] - bps[c]) * (a * a + a * b + b * b) / 3
    return _out(total, exact)


# ------------------------------------------------------------- balancedness


def is_balanced(u: ControlSignal, U: ControlSetSpec, r: int, t: float, policy: str = "nearest") -> BuilderParams | None:
    """Shift sizes ``(α^r, β^r)`` with ``u(s) + α e_r`` and ``u(s) - β e_r`` in U just left of ``t``.

    ``policy`` picks the nearest feasible shift or the farthest one. Returns
    None when either direction is blocked.
    """
    if not 0.0 < t < u.horizon:
        raise ValueError(f"t={t!r} must lie in (0, {u.horizon!r})")
    if not 1 <= r <= u.m:
        raise ValueError(f"index {r} out of range 1..{u.m}")
    if policy not in ("nearest", "farthest"):
        raise ValueError(f"unknown policy {policy!r}")
    up, down = U.shifts(u.left_value(t), r - 1)
    if not up or not down:
        return None
    pick = (lambda xs: xs[0]) if policy == "nearest" else (lambda xs: xs[-1])
    return BuilderParams({r: pick(up)}, {r: pick(down)})


def balanced_params(u: ControlSignal, U: ControlSetSpec, sig, t: float, policy: str = "nearest") -> BuilderParams | None:
    """Combined ``is_balanced`` parameters for every index the signal involves."""
    out = None
    for r in sig.indices:
        p = is_balanced(u, U, r, t, policy)
        if p is None:
            return None
        out = p if out is None else out.merged(p)
    return out


# ------------------------------------------------------------ perturbations


def apply_variation(
    u: ControlSignal,
    sig,
    params: BuilderParams | None,
    tbar: float,
    eps: float,
    reversed: bool = False,
    U: ControlSetSpec | None = None,
    layout: str = "feasible",
) -> ControlSignal:
    """Perturb ``u`` on ``[t̄ - w, t̄]`` with the signal's builder (or needle value).

    With ``U`` given, every perturbed value is checked for membership and the
    result carries a certificate; otherwise it is returned uncertified.
    """
    validate_signal(sig, u.m)
    if eps < 0.0:
        raise ValueError("eps must be non-negative")
    if eps == 0.0:
        return u
    w = window_width(sig, eps)
    if w > tbar * (1.0 + 1e-12) or tbar > u.horizon * (1.0 + 1e-12):
        raise WindowError(f"window of width {w:.6g} does not fit before t={tbar:.6g}")
    start = max(0.0, tbar - w)
    if isinstance(sig, Needle):
        out = u.replace(start, tbar, np.array(sig.value))
        window = (out.snap(start), out.snap(tbar))
    else:
        prof = build_profile(sig, params, u.m, reversed, layout)
        pts = [tbar - w * float(1 - b) for b in prof.breakpoints]
        pts[0] = start
        out = u.refine(pts)
        window = (out.snap(pts[0]), out.snap(pts[-1]))
        knots = np.array([out.snap(p) for p in pts])
        gam = prof.array()
        vals = out.values.copy()
        lo = np.searchsorted(out.grid, window[0], side="left")
        hi = np.searchsorted(out.grid, window[1], side="left")
        for c in range(lo, hi):
            piece = np.searchsorted(knots, out.grid[c], side="right") - 1
            vals[c] = vals[c] + gam[min(piece, len(gam) - 1)]
        out = ControlSignal(out.grid, vals)
    if U is not None:
        lo = np.searchsorted(out.grid, window[0], side="left")
        hi = np.searchsorted(out.grid, window[1], side="left")
        for c in range(lo, hi):
            if not U.contains(out.values[c]):
                raise CertificationError(
                    f"perturbed control {out.values[c].tolist()} at t={out.grid[c]:.6g} leaves the control set"
                )
        return out.with_certificate()
    return out
