"""Control sets ``U ⊂ R^m``: finite products, boxes and explicit point lists."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from varlab.errors import DimensionError

TOL = 1e-12


class ControlSetSpec:
    """Common interface. ``m`` is the control dimension."""

    m: int

    def contains(self, u, tol: float = TOL) -> bool:
        raise NotImplementedError

    def shifts(self, u, r: int, tol: float = TOL):
        """Feasible ``(up, down)`` shift sizes along axis ``r`` (0-based) from ``u``, each sorted ascending."""
        raise NotImplementedError

    def maximize(self, c, tol: float = TOL):
        """Maximize the linear form ``c·u`` over U; returns ``(value, list of maximizers)``."""
        raise NotImplementedError

    def points(self) -> np.ndarray:
        """Points (or vertices, for a box) spanning U."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


def _in(x: float, values, tol: float) -> bool:
    return any(abs(x - v) <= tol * max(1.0, abs(v)) for v in values)


@dataclass(frozen=True)
class FiniteProduct(ControlSetSpec):
    """``U = S_1 × … × S_m`` with each ``S_k`` finite."""

    sets: tuple

    def __post_init__(self):
        sets = tuple(tuple(sorted(float(v) for v in set(s))) for s in self.sets)
        if not sets or any(len(s) == 0 for s in sets):
            raise ValueError("control set components must be non-empty")
        object.__setattr__(self, "sets", sets)

    @property
    def m(self) -> int:
        return len(self.sets)

    def contains(self, u, tol=TOL) -> bool:
        u = np.asarray(u, dtype=float)
        return u.shape == (self.m,) and all(_in(x, s, tol) for x, s in zip(u, self.sets))

    def shifts(self, u, r, tol=TOL):
        if not self.contains(u, tol):
            return [], []
        v = float(u[r])
        scale = tol * max(1.0, abs(v))
        up = [s - v for s in self.sets[r] if s - v > scale]
        down = sorted(v - s for s in self.sets[r] if v - s > scale)
        return up, down

    def maximize(self, c, tol=TOL):
        c = np.asarray(c, dtype=float)
        best, choices = 0.0, []
        for ck, s in zip(c, self.sets):
            vals = [ck * v for v in s]
            top = max(vals)
            best += top
            choices.append([v for v, w in zip(s, vals) if w >= top - tol * max(1.0, abs(top))])
        return best, [np.array(p) for p in itertools.product(*choices)]

    def points(self) -> np.ndarray:
        return np.array(list(itertools.product(*self.sets)), dtype=float)

    def to_dict(self) -> dict:
        return {"kind": "finite_product", "sets": [list(s) for s in self.sets]}


@dataclass(frozen=True)
class Box(ControlSetSpec):
    """``U = [lo_1, hi_1] × … × [lo_m, hi_m]``."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if len(lo) != len(hi) or not lo:
            raise DimensionError("box bounds must have equal non-zero length")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError("box lower bounds must not exceed upper bounds")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def m(self) -> int:
        return len(self.lo)

    def contains(self, u, tol=TOL) -> bool:
        u = np.asarray(u, dtype=float)
        return u.shape == (self.m,) and all(
            a - tol * max(1.0, abs(a)) <= x <= b + tol * max(1.0, abs(b)) for x, a, b in zip(u, self.lo, self.hi)
        )

    def shifts(self, u, r, tol=TOL):
        if not self.contains(u, tol):
            return [], []
        v = float(u[r])
        up, down = self.hi[r] - v, v - self.lo[r]
        scale = tol * max(1.0, abs(v))
        return ([up] if up > scale else []), ([down] if down > scale else [])

    def maximize(self, c, tol=TOL):
        c = np.asarray(c, dtype=float)
        best, choices = 0.0, []
        for ck, a, b in zip(c, self.lo, self.hi):
            top = max(ck * a, ck * b)
            best += top
            if abs(ck) <= tol:
                choices.append(sorted({a, b}))
            else:
                choices.append([b] if ck > 0 else [a])
        return best, [np.array(p) for p in itertools.product(*choices)]

    def points(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)

    def to_dict(self) -> dict:
        return {"kind": "box", "lo": list(self.lo), "hi": list(self.hi)}


@dataclass(frozen=True)
class ExplicitList(ControlSetSpec):
    """A finite list of points in ``R^m``."""

    pts: tuple

    def __post_init__(self):
        pts = tuple(tuple(float(v) for v in p) for p in self.pts)
        if not pts:
            raise ValueError("control set must be non-empty")
        if len({len(p) for p in pts}) != 1:
            raise DimensionError("control points must share one dimension")
        object.__setattr__(self, "pts", tuple(sorted(set(pts))))

    @property
    def m(self) -> int:
        return len(self.pts[0])

    def contains(self, u, tol=TOL) -> bool:
        u = np.asarray(u, dtype=float)
        return u.shape == (self.m,) and any(
            np.all(np.abs(u - p) <= tol * np.maximum(1.0, np.abs(p))) for p in np.array(self.pts)
        )

    def shifts(self, u, r, tol=TOL):
        if not self.contains(u, tol):
            return [], []
        u = np.asarray(u, dtype=float)
        up, down = [], []
        scale = tol * max(1.0, abs(u[r]))
        for p in np.array(self.pts):
            others = np.delete(np.abs(p - u), r)
            if np.all(others <= tol * np.maximum(1.0, np.abs(np.delete(u, r)))):
                d = p[r] - u[r]
                if d > scale:
                    up.append(d)
                elif -d > scale:
                    down.append(-d)
        return sorted(up), sorted(down)

    def maximize(self, c, tol=TOL):
        pts = np.array(self.pts)
        vals = pts @ np.asarray(c, dtype=float)
        top = float(vals.max())
        return top, [p for p, v in zip(pts, vals) if v >= top - tol * max(1.0, abs(top))]

    def points(self) -> np.ndarray:
        return np.array(self.pts)

    def to_dict(self) -> dict:
        return {"kind": "explicit", "points": [list(p) for p in self.pts]}
