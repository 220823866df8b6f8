"""Necessary-condition checks for a candidate process.

The terminal covector is parameterised as ``p(T) = -λ∇Ψ(x(T)) - Dᵀη`` for an
affine target ``{x : Dx = d}`` and normalised so that ``‖(p(T), λ)‖ = 1``.
Since ``p(t) = p(T)Φ(T, t)`` is linear in ``(λ, η)``, the search precomputes
the transported basis once and then scans candidates with plain array work.

The checker is sound for refutation only: it reports whether every multiplier
it found violates some applicable condition, not whether a multiplier
satisfying all conditions jointly exists in general.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from varlab import kernels
from varlab.controlset import Box, ControlSetSpec, ExplicitList, FiniteProduct
from varlab.errors import DimensionError, InfeasibleEndpointError
from varlab.exprcore import Program
from varlab.fields import BracketField, ControlAffineSystem, Grade
from varlab.flows import ControlSignal, CovectorPath, Trajectory, adjoint_solve, integrate
from varlab.parallel import pmap

__all__ = [
    "Box",
    "ConditionReport",
    "ConditionResult",
    "ControlSetSpec",
    "ExplicitList",
    "FiniteProduct",
    "Multiplier",
    "MultiplierReport",
    "MultiplierSearch",
    "TargetSpec",
    "balanced_fraction",
    "check_conditions",
    "hamiltonian",
    "max_hamiltonian",
    "multiplier_search",
]

BRACKET_TOL = 1e-6
PMP_REL_TOL = 1e-7
APPLICABLE_FRACTION = 1.0 - 1e-6
DEDUP_ANGLE = 1e-3


@dataclass(frozen=True, eq=False)
class TargetSpec:
    """Affine target ``{x : D x = d}``; ``D`` may have zero rows (free endpoint)."""

    D: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        d = np.asarray(self.d, dtype=float).reshape(-1)
        if D.ndim != 2 or D.shape[0] != d.shape[0]:
            raise DimensionError(f"target matrix {D.shape} and vector {d.shape} disagree")
        if D.shape[0] > D.shape[1]:
            raise DimensionError("target has more constraints than state dimensions")
        if D.shape[0] and np.linalg.matrix_rank(D) < D.shape[0]:
            raise DimensionError("target matrix must have full row rank")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "d", d)

    @classmethod
    def free(cls, n: int) -> "TargetSpec":
        return cls(np.zeros((0, n)), np.zeros(0))

    @property
    def q(self) -> int:
        return self.D.shape[0]

    def residual(self, x) -> float:
        return float(np.linalg.norm(self.D @ np.asarray(x, dtype=float) - self.d)) if self.q else 0.0


@dataclass(frozen=True, eq=False)
class Multiplier:
    """``(p, λ)`` with ``p(T) = -λ∇Ψ - Dᵀη`` and ``‖(p(T), λ)‖ = 1``."""

    lam: float
    eta: np.ndarray
    p_terminal: np.ndarray
    path: CovectorPath
    pmp_residual: float
    pmp_tol: float

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "eta": self.eta.tolist(),
            "p_T": self.p_terminal.tolist(),
            "p_0": self.path.values[0].tolist(),
            "pmp_residual": self.pmp_residual,
            "pmp_tol": self.pmp_tol,
        }


# --------------------------------------------------------------- Hamiltonian


def hamiltonian(x, p, u, sys: ControlAffineSystem) -> float:
    """``H(x, p, u) = p·(f(x) + Σ g_i(x) u^i)``."""
    p = np.asarray(p, dtype=float)
    if p.shape != (sys.n,):
        raise DimensionError(f"covector must have length {sys.n}")
    return float(p @ sys.dynamics(x, u))


def max_hamiltonian(x, p, U: ControlSetSpec, sys: ControlAffineSystem, tol: float = 1e-12):
    """``(max_u H, maximizers)``; ties within ``tol`` are all returned."""
    if U.m != sys.m:
        raise DimensionError(f"control set has m={U.m}, system has m={sys.m}")
    p = np.asarray(p, dtype=float)
    if p.shape != (sys.n,):
        raise DimensionError(f"covector must have length {sys.n}")
    c = np.array([p @ g(x) for g in sys.controlled])
    value, argmax = U.maximize(c, tol)
    return float(p @ sys.drift(x)) + value, argmax


# ------------------------------------------------------------ PMP residuals


class _PmpTable:
    """Precomputed switching functions for a basis of terminal covectors.

    Samples are (node, cell) pairs: the start of every RK4 step with that
    step's control, plus each cell's right end with the cell's own control,
    so jumps are seen from both sides.
    """

    def __init__(self, sys, u, traj, basis, U):
        self.basis = basis
        transport = traj.transport
        if traj.steps:
            # step starts, plus the left limit at every cell end
            ends = np.asarray(traj.cell_start[1:], dtype=int)
            nodes = np.concatenate([np.arange(traj.steps), ends])
            cells = np.concatenate([traj.step_cell, traj.step_cell[ends - 1]])
        else:
            nodes = np.zeros(0, dtype=int)
            cells = np.zeros(0, dtype=int)
        packed = np.array([kernels.values(sys.program, traj.states[k]) for k in range(traj.steps + 1)])
        packed = packed.reshape(traj.steps + 1, sys.m + 1, sys.n)
        G = packed[:, 1:, :]  # (K, m, n)
        ubar = u.values[cells] if len(cells) else np.zeros((0, sys.m))
        # p-basis at every node: (q+1, K, n)
        pb = np.einsum("jn,kni->jki", basis, transport)
        self.p_basis = pb
        self.switch = np.einsum("jkn,kin->jki", pb, G)[:, nodes, :]  # (q+1, S, m)
        self.ubar = ubar
        self.support = _support_function(U)
        dyn = packed[nodes, 0, :] + np.einsum("sm,smn->sn", ubar, G[nodes])
        self.max_dynamics = float(np.max(np.linalg.norm(dyn, axis=1))) if len(nodes) else 0.0

    def residuals(self, thetas: np.ndarray) -> np.ndarray:
        """Unnormalised residual ``max_t (max_U H - H(ū))`` for each row of ``thetas``."""
        if self.switch.shape[1] == 0:
            return np.zeros(len(thetas))
        C = np.tensordot(thetas, self.switch, axes=(1, 0))  # (B, S, m)
        best = self.support(C)
        here = np.einsum("bsm,sm->bs", C, self.ubar)
        return np.maximum(np.max(best - here, axis=1), 0.0)

    def terminal(self, thetas: np.ndarray) -> np.ndarray:
        return thetas @ self.basis

    def scale(self, thetas: np.ndarray) -> np.ndarray:
        pT = self.terminal(thetas)
        return np.sqrt(np.sum(pT**2, axis=1) + thetas[:, 0] ** 2)

    def normalized(self, thetas: np.ndarray) -> np.ndarray:
        s = self.scale(thetas)
        out = np.full(len(thetas), np.inf)
        ok = s > 1e-300
        out[ok] = self.residuals(thetas[ok]) / s[ok]
        return out

    def tolerance(self, theta: np.ndarray) -> float:
        p = np.tensordot(theta, self.p_basis, axes=(0, 0))
        pmax = float(np.max(np.linalg.norm(p, axis=1)))
        return PMP_REL_TOL * (1.0 + pmax * self.max_dynamics)


def _support_function(U: ControlSetSpec):
    """Vectorised ``c ↦ max_{u∈U} c·u`` over the last axis of ``c``."""
    if isinstance(U, (FiniteProduct, Box)):
        if isinstance(U, FiniteProduct):
            lo = np.array([s[0] for s in U.sets])
            hi = np.array([s[-1] for s in U.sets])
        else:
            lo, hi = np.array(U.lo), np.array(U.hi)
        return lambda C: np.sum(np.maximum(C * lo, C * hi), axis=-1)
    pts = U.points()
    return lambda C: np.max(C @ pts.T, axis=-1)


def _cost_gradient(sys, x) -> np.ndarray:
    return kernels.jacobian(Program.build([sys.cost], sys.n), np.asarray(x, dtype=float))[0]


def _sphere(rng, count, dim):
    z = rng.standard_normal((count, dim))
    z[:, 0] = np.abs(z[:, 0])
    axes = np.vstack([np.eye(dim), -np.eye(dim)[1:]])
    z = np.vstack([axes, z])
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def _descend(table: _PmpTable, theta: np.ndarray, halvings: int = 40, step: float = 0.25, max_iter: int = 600):
    """Coordinate descent with step halving on the normalised residual; ``λ`` stays non-negative."""
    theta = theta.copy()
    best = float(table.normalized(theta[None])[0])
    dim = len(theta)
    done = 0
    it = 0
    while done < halvings and it < max_iter:
        it += 1
        trials = []
        for j in range(dim):
            for sgn in (1.0, -1.0):
                t = theta.copy()
                t[j] += sgn * step
                t[0] = max(t[0], 0.0)
                trials.append(t)
        trials = np.array(trials)
        vals = table.normalized(trials)
        k = int(np.argmin(vals))
        if vals[k] < best - 1e-15 * max(1.0, best):
            best = float(vals[k])
            theta = trials[k] / np.linalg.norm(trials[k])
        else:
            step *= 0.5
            done += 1
    return theta, best


@dataclass(frozen=True, eq=False)
class MultiplierSearch:
    """Multipliers found at tolerance, plus the best candidate seen (for diagnostics)."""

    multipliers: tuple
    best: Multiplier
    tol: float | None

    def __iter__(self):
        return iter(self.multipliers)

    def __len__(self) -> int:
        return len(self.multipliers)

    def __getitem__(self, k):
        return self.multipliers[k]

    @property
    def diagnostic(self) -> str:
        if self.multipliers:
            return f"{len(self.multipliers)} PMP multiplier(s) found"
        b = self.best
        return (
            "no PMP multiplier found at tolerance: best candidate "
            f"lambda={b.lam:.17g}, eta={b.eta.tolist()}, residual {b.pmp_residual:.6e} > {b.pmp_tol:.3e}"
        )


def _multiplier(sys, u, traj, table, theta, residual, tol=None) -> Multiplier:
    theta = theta / float(table.scale(theta[None])[0])
    pT = table.terminal(theta[None])[0]
    path = adjoint_solve(sys, u, traj, pT)
    return Multiplier(
        float(theta[0]), theta[1:].copy(), pT, path, float(residual),
        table.tolerance(theta) if tol is None else float(tol),
    )


def multiplier_search(
    sys: ControlAffineSystem,
    u: ControlSignal,
    traj: Trajectory | None,
    target: TargetSpec,
    U: ControlSetSpec,
    tol: float | None = None,
    feasibility_tol: float = 1e-8,
    samples: int | None = None,
    seeds: int = 16,
    seed: int = 0,
    threads: int | None = None,
) -> MultiplierSearch:
    """Normalised multipliers whose PMP residual is at most ``tol``.

    ``tol=None`` uses ``1e-7·(1 + max‖p‖·max‖f + Σ g_i ū^i‖)`` per candidate.
    Raises InfeasibleEndpointError when ``‖Dx(T) - d‖ > feasibility_tol``.
    """
    if target.D.shape[1] != sys.n:
        raise DimensionError(f"target is over R^{target.D.shape[1]}, system has n={sys.n}")
    if traj is None or traj.step_jacobians is None:
        traj = integrate(sys, u, jacobians=True)
    xT = traj.final
    miss = target.residual(xT)
    if miss > feasibility_tol * (1.0 + float(np.linalg.norm(target.d))):
        raise InfeasibleEndpointError(miss)
    basis = np.vstack([-_cost_gradient(sys, xT)[None, :], -target.D])
    table = _PmpTable(sys, u, traj, basis, U)
    dim = target.q + 1
    if samples is None:
        samples = 10_000 if dim <= 4 else 100_000
    rng = np.random.default_rng(seed)
    if dim == 1:
        cand = np.ones((1, 1))
    else:
        cand = _sphere(rng, samples, dim)
    coarse = np.concatenate([table.normalized(chunk) for chunk in np.array_split(cand, max(1, len(cand) // 256))])
    order = np.argsort(coarse, kind="stable")
    starts = []
    for k in order:
        if not np.isfinite(coarse[k]):
            break
        if all(abs(float(cand[k] @ s)) < math.cos(1e-2) for s in starts):
            starts.append(cand[k])
        if len(starts) >= seeds:
            break
    if dim == 1:
        refined = [(cand[0], float(coarse[0]))]
    else:
        refined = pmap(lambda th: _descend(table, th), starts, threads)
    refined.sort(key=lambda r: r[1])
    found = []
    for theta, res in refined:
        theta = theta / float(table.scale(theta[None])[0])
        limit = table.tolerance(theta) if tol is None else tol
        if res > limit:
            continue
        vec = np.concatenate([table.terminal(theta[None])[0], theta[:1]])
        if any(math.acos(min(1.0, float(vec @ v))) < DEDUP_ANGLE for v, _ in found):
            continue
        found.append((vec, _multiplier(sys, u, traj, table, theta, res, limit)))
    best_theta, best_res = refined[0]
    best = found[0][1] if found else _multiplier(sys, u, traj, table, best_theta, best_res, tol)
    return MultiplierSearch(tuple(m for _, m in found), best, tol)


# ------------------------------------------------------------- conditions


def balanced_fraction(u: ControlSignal, U: ControlSetSpec, r: int) -> float:
    """Fraction of ``[0, T]`` on which component ``r`` (1-based) admits both an up and a down shift in U."""
    if u.cells == 0 or u.horizon == 0.0:
        return 0.0
    widths = np.diff(u.grid)
    ok = 0.0
    for c in range(u.cells):
        up, down = U.shifts(u.values[c], r - 1)
        if up and down:
            ok += widths[c]
    return ok / u.horizon


@dataclass(frozen=True)
class ConditionResult:
    """One bracket condition: ``residual`` is ``max|p·B|`` (Goh, LC2) or ``min p·B`` (LC3)."""

    name: str
    applicable: bool
    residual: float
    violated: bool

    def to_dict(self) -> dict:
        return {"applicable": self.applicable, "residual": self.residual, "violated": self.violated}


@dataclass(frozen=True, eq=False)
class MultiplierReport:
    multiplier: Multiplier
    pmp_violated: bool
    goh: dict
    lc2: dict
    lc3: ConditionResult | None

    @property
    def conditions(self) -> list:
        out = list(self.goh.values()) + list(self.lc2.values())
        return out + ([self.lc3] if self.lc3 is not None else [])

    @property
    def violations(self) -> list:
        names = ["PMP"] if self.pmp_violated else []
        return names + [c.name for c in self.conditions if c.applicable and c.violated]

    @property
    def any_applicable(self) -> bool:
        return any(c.applicable for c in self.conditions)

    def goh_residual(self, i: int, j: int) -> float:
        """Residual of the (i, j) Goh condition; symmetric in ``i, j``."""
        return self.goh[(min(i, j), max(i, j))].residual

    def to_dict(self) -> dict:
        return {
            "multiplier": self.multiplier.to_dict(),
            "pmp_violated": self.pmp_violated,
            "goh": {f"{i},{j}": c.to_dict() for (i, j), c in self.goh.items()},
            "lc2": {str(i): c.to_dict() for i, c in self.lc2.items()},
            "lc3": None if self.lc3 is None else self.lc3.to_dict(),
            "violations": self.violations,
        }


@dataclass(frozen=True, eq=False)
class ConditionReport:
    reports: tuple
    verdict: str
    exit_code: int
    diagnostic: str = ""
    bracket_tol: float = BRACKET_TOL
    balanced: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "exit_code": self.exit_code,
            "diagnostic": self.diagnostic,
            "bracket_tol": self.bracket_tol,
            "balanced_fraction": {str(k): v for k, v in self.balanced.items()},
            "multipliers": [r.to_dict() for r in self.reports],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [f"verdict: {self.verdict}", f"exit code: {self.exit_code}"]
        if self.diagnostic:
            lines.append(f"diagnostic: {self.diagnostic}")
        for r, frac in self.balanced.items():
            lines.append(f"component {r} balanced on {frac:.6f} of [0,T]")
        for k, rep in enumerate(self.reports, 1):
            mu = rep.multiplier
            lines.append(
                f"multiplier {k}: lambda={mu.lam:.17g} eta={[float(v) for v in mu.eta]} "
                f"p(T)={[float(v) for v in mu.p_terminal]}"
            )
            lines.append(f"  PMP residual {mu.pmp_residual:.6e} (tol {mu.pmp_tol:.3e})")
            for c in rep.conditions:
                state = "n/a" if not c.applicable else ("VIOLATED" if c.violated else "ok")
                lines.append(f"  {c.name}: residual {c.residual:.17g} [{state}]")
        return "\n".join(lines) + "\n"


def _bracket_values(B, states) -> np.ndarray:
    return np.array([B(x) for x in states])


def check_conditions(
    sys: ControlAffineSystem,
    u: ControlSignal,
    traj: Trajectory | None,
    multipliers,
    U: ControlSetSpec,
    bracket_tol: float = BRACKET_TOL,
    diagnostic: str = "",
) -> ConditionReport:
    """Evaluate PMP and Goh / LC2 / LC3 residuals for each multiplier.

    Brackets are sampled at every RK4 node. A condition applies when the
    involved components are balanced on all but a ``1e-6`` fraction of
    ``[0, T]``. LC3 is violated when ``min_t p·[g,[f,g]] < -tol``.
    """
    if traj is None:
        traj = integrate(sys, u, jacobians=True)
    multipliers = list(multipliers)
    balanced = {r: float(balanced_fraction(u, U, r)) for r in range(1, sys.m + 1)}
    ok = {r: bool(frac >= APPLICABLE_FRACTION) for r, frac in balanced.items()}
    if not multipliers:
        return ConditionReport((), "no PMP multiplier found at tolerance", 4, diagnostic, bracket_tol, balanced)

    f, g = sys.drift, sys.controlled
    X = traj.states
    goh_B = {(i, j): _bracket_values(BracketField(g[i - 1], g[j - 1]), X)
             for i in range(1, sys.m + 1) for j in range(i + 1, sys.m + 1)}
    lc2_B = {i: _bracket_values(BracketField(f, g[i - 1]), X) for i in range(1, sys.m + 1)}
    lc3_B = None
    if sys.m == 1 and sys.grade >= Grade.C2:
        lc3_B = _bracket_values(BracketField(g[0], BracketField(f, g[0])), X)

    reports = []
    for mu in multipliers:
        P = mu.path.values
        if P.shape[0] != X.shape[0]:
            P = mu.path(traj.times)
        goh = {}
        for (i, j), B in goh_B.items():
            res = float(np.max(np.abs(np.einsum("kn,kn->k", P, B))))
            goh[(i, j)] = ConditionResult(f"Goh({i},{j})", ok[i] and ok[j], res, res > bracket_tol)
        lc2 = {}
        for i, B in lc2_B.items():
            res = float(np.max(np.abs(np.einsum("kn,kn->k", P, B))))
            lc2[i] = ConditionResult(f"LC2({i})", ok[i], res, res > bracket_tol)
        lc3 = None
        if lc3_B is not None:
            res = float(np.min(np.einsum("kn,kn->k", P, lc3_B)))
            lc3 = ConditionResult("LC3", ok[1], res, res < -bracket_tol)
        pmp_bad = not mu.pmp_residual <= mu.pmp_tol
        reports.append(MultiplierReport(mu, pmp_bad, goh, lc2, lc3))

    if all(r.violations for r in reports):
        first = reports[0].violations[0]
        verdict = f"necessary conditions violated by every multiplier ({first} for the first)"
        code = 3
    elif not any(r.any_applicable for r in reports):
        verdict, code = "PMP satisfied, no applicable higher-order test", 0
    else:
        verdict, code = "no violation found", 0
    return ConditionReport(tuple(reports), verdict, code, diagnostic, bracket_tol, balanced)
