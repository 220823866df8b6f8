"""TOML problem configs.

Sections: ``[system]``, ``[control_set]``, ``[target]``, ``[control]``,
``[numerics]`` and ``[ladder]``. See docs/formats.md for the schema. Every
error names the offending field, e.g. ``system.controlled[1][2]``.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from varlab.conditions import TargetSpec
from varlab.controlset import Box, ControlSetSpec, ExplicitList, FiniteProduct
from varlab.errors import ConfigError, ExprSyntaxError, VarlabError
from varlab.exprcore import parse
from varlab.fields import ControlAffineSystem, ExprField, Grade
from varlab.flows import ControlSignal

BUNDLED = ("worked_example", "goh_counterexample")


@dataclass(frozen=True, eq=False)
class Numerics:
    step: float | None = None
    pmp_tol: float | None = None
    bracket_tol: float = 1e-6
    feasibility_tol: float = 1e-8
    samples: int | None = None
    seeds: int = 16


@dataclass(frozen=True, eq=False)
class LadderSettings:
    epsilons: tuple = tuple(1e-2 * 2.0**-k for k in range(6))
    tbar: float | None = None
    policy: str = "nearest"
    layout: str = "feasible"


@dataclass(frozen=True, eq=False)
class ProblemConfig:
    system: ControlAffineSystem
    control: ControlSignal
    control_set: ControlSetSpec | None = None
    target: TargetSpec | None = None
    numerics: Numerics = field(default_factory=Numerics)
    ladder: LadderSettings = field(default_factory=LadderSettings)
    source: str = ""


# ------------------------------------------------------------------ helpers


def _get(table: dict, key: str, path: str, required: bool = True, default=None):
    if key in table:
        return table[key]
    if required:
        raise ConfigError(f"{path}.{key}" if path else key, "missing required field")
    return default


def _number(v, path: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(path, f"expected a number, got {v!r}")
    return float(v)


def _numbers(v, path: str, length: int | None = None) -> list:
    if not isinstance(v, list):
        raise ConfigError(path, f"expected an array, got {v!r}")
    if length is not None and len(v) != length:
        raise ConfigError(path, f"expected {length} entries, got {len(v)}")
    return [_number(x, f"{path}[{k}]") for k, x in enumerate(v)]


def _matrix(v, path: str, cols: int | None = None) -> list:
    if not isinstance(v, list):
        raise ConfigError(path, f"expected an array of arrays, got {v!r}")
    return [_numbers(row, f"{path}[{k}]", cols) for k, row in enumerate(v)]


def _expr(text, n: int, path: str):
    if not isinstance(text, str):
        raise ConfigError(path, f"expected an expression string, got {text!r}")
    try:
        return parse(text, n)
    except ExprSyntaxError as exc:
        raise ConfigError(path, str(exc)) from None


def _check_keys(table: dict, allowed: set, path: str) -> None:
    for key in table:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")


# ------------------------------------------------------------------ sections


def _system(t: dict) -> ControlAffineSystem:
    _check_keys(t, {"n", "m", "drift", "controlled", "cost", "initial", "horizon", "grade"}, "system")
    drift = _get(t, "drift", "system")
    if not isinstance(drift, list) or not drift:
        raise ConfigError("system.drift", "expected a non-empty array of expression strings")
    n = len(drift)
    if "n" in t and t["n"] != n:
        raise ConfigError("system.n", f"declared n={t['n']!r} but drift has {n} components")
    grade_name = _get(t, "grade", "system", False, "C2")
    try:
        grade = Grade[grade_name] if isinstance(grade_name, str) else Grade(grade_name)
    except (KeyError, ValueError):
        raise ConfigError("system.grade", f"unknown smoothness grade {grade_name!r}") from None
    f = ExprField([_expr(e, n, f"system.drift[{k}]") for k, e in enumerate(drift)], grade)
    ctrl = _get(t, "controlled", "system")
    if not isinstance(ctrl, list) or not ctrl:
        raise ConfigError("system.controlled", "expected a non-empty array of fields")
    if "m" in t and t["m"] != len(ctrl):
        raise ConfigError("system.m", f"declared m={t['m']!r} but {len(ctrl)} controlled fields given")
    gs = []
    for i, g in enumerate(ctrl):
        path = f"system.controlled[{i}]"
        if not isinstance(g, list) or len(g) != n:
            raise ConfigError(path, f"expected {n} expression strings")
        gs.append(ExprField([_expr(e, n, f"{path}[{k}]") for k, e in enumerate(g)], grade))
    cost = _expr(_get(t, "cost", "system", False, "0"), n, "system.cost")
    x0 = _numbers(_get(t, "initial", "system", False, [0.0] * n), "system.initial", n)
    T = _number(_get(t, "horizon", "system", False, 1.0), "system.horizon")
    if T < 0.0:
        raise ConfigError("system.horizon", "must be non-negative")
    return ControlAffineSystem(f, tuple(gs), cost, np.array(x0), T)


def _control_set(t: dict, m: int) -> ControlSetSpec:
    kind = _get(t, "kind", "control_set")
    try:
        if kind == "finite_product":
            _check_keys(t, {"kind", "sets"}, "control_set")
            sets = _get(t, "sets", "control_set")
            if not isinstance(sets, list) or len(sets) != m:
                raise ConfigError("control_set.sets", f"expected {m} component sets")
            U = FiniteProduct(tuple(_numbers(s, f"control_set.sets[{k}]") for k, s in enumerate(sets)))
        elif kind == "box":
            _check_keys(t, {"kind", "lo", "hi"}, "control_set")
            U = Box(_numbers(_get(t, "lo", "control_set"), "control_set.lo", m),
                    _numbers(_get(t, "hi", "control_set"), "control_set.hi", m))
        elif kind == "explicit":
            _check_keys(t, {"kind", "points"}, "control_set")
            U = ExplicitList(_matrix(_get(t, "points", "control_set"), "control_set.points", m))
        else:
            raise ConfigError("control_set.kind", f"unknown kind {kind!r} (finite_product, box, explicit)")
    except ConfigError:
        raise
    except (ValueError, VarlabError) as exc:
        raise ConfigError("control_set", str(exc)) from None
    return U


def _target(t: dict, n: int) -> TargetSpec:
    _check_keys(t, {"D", "d"}, "target")
    D = _matrix(_get(t, "D", "target"), "target.D", n)
    d = _numbers(_get(t, "d", "target"), "target.d", len(D))
    try:
        return TargetSpec(np.array(D).reshape(len(D), n), np.array(d))
    except VarlabError as exc:
        raise ConfigError("target.D", str(exc)) from None


def _control(t: dict, sys: ControlAffineSystem, U: ControlSetSpec | None) -> ControlSignal:
    _check_keys(t, {"grid", "values", "certify"}, "control")
    T = sys.horizon
    grid = _numbers(_get(t, "grid", "control", False, [0.0, T] if T > 0 else [0.0]), "control.grid")
    values = _get(t, "values", "control")
    vals = _matrix(values, "control.values", sys.m)
    if len(vals) != len(grid) - 1:
        raise ConfigError("control.values", f"expected {len(grid) - 1} rows for {len(grid)} grid points")
    if abs(grid[-1] - T) > 1e-12 * max(1.0, T):
        raise ConfigError("control.grid", f"last grid point {grid[-1]!r} differs from horizon {T!r}")
    try:
        u = ControlSignal(np.array(grid), np.array(vals).reshape(len(vals), sys.m))
    except (ValueError, VarlabError) as exc:
        raise ConfigError("control.grid", str(exc)) from None
    if t.get("certify", False):
        if U is None:
            raise ConfigError("control.certify", "certification needs a [control_set] section")
        for k, row in enumerate(vals):
            if not U.contains(row):
                raise ConfigError(f"control.values[{k}]", f"{row} is not in the control set")
        u = u.with_certificate()
    return u


def _numerics(t: dict) -> Numerics:
    _check_keys(t, {"step", "pmp_tol", "bracket_tol", "feasibility_tol", "samples", "seeds"}, "numerics")
    out = {}
    for key in ("step", "pmp_tol", "bracket_tol", "feasibility_tol"):
        if key in t:
            v = _number(t[key], f"numerics.{key}")
            if v < 0.0 or (key == "step" and v == 0.0):
                raise ConfigError(f"numerics.{key}", "must be positive")
            out[key] = v
    for key in ("samples", "seeds"):
        if key in t:
            v = t[key]
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ConfigError(f"numerics.{key}", "expected a positive integer")
            out[key] = v
    return Numerics(**out)


def _ladder(t: dict) -> LadderSettings:
    _check_keys(t, {"epsilons", "tbar", "policy", "layout"}, "ladder")
    out = {}
    if "epsilons" in t:
        eps = _numbers(t["epsilons"], "ladder.epsilons")
        if len(eps) < 4 or any(e <= 0 for e in eps):
            raise ConfigError("ladder.epsilons", "need at least four positive values")
        out["epsilons"] = tuple(eps)
    if "tbar" in t:
        out["tbar"] = _number(t["tbar"], "ladder.tbar")
    if "policy" in t:
        if t["policy"] not in ("nearest", "farthest"):
            raise ConfigError("ladder.policy", "expected 'nearest' or 'farthest'")
        out["policy"] = t["policy"]
    if "layout" in t:
        if t["layout"] not in ("feasible", "antisymmetric"):
            raise ConfigError("ladder.layout", "expected 'feasible' or 'antisymmetric'")
        out["layout"] = t["layout"]
    return LadderSettings(**out)


# --------------------------------------------------------------------- entry


def loads(text: str, source: str = "<string>") -> ProblemConfig:
    """Parse a config document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<document>", f"invalid TOML: {exc}") from None
    _check_keys(doc, {"system", "control_set", "target", "control", "numerics", "ladder"}, "")
    for key in doc:
        if not isinstance(doc[key], dict):
            raise ConfigError(key, "expected a table")
    sys_ = _system(_get(doc, "system", ""))
    U = _control_set(doc["control_set"], sys_.m) if "control_set" in doc else None
    target = _target(doc["target"], sys_.n) if "target" in doc else None
    u = _control(_get(doc, "control", ""), sys_, U)
    return ProblemConfig(
        sys_, u, U, target,
        _numerics(doc.get("numerics", {})), _ladder(doc.get("ladder", {})), source,
    )


def load(path) -> ProblemConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(str(p), f"cannot read config: {exc.strerror}") from None
    return loads(text, str(p))


def bundled_text(name: str = "worked_example") -> str:
    if name not in BUNDLED:
        raise ConfigError("<example>", f"unknown example {name!r}; choose from {', '.join(BUNDLED)}")
    return resources.files("varlab").joinpath("data", f"{name}.toml").read_text(encoding="utf-8")


def bundled(name: str = "worked_example") -> ProblemConfig:
    return loads(bundled_text(name), f"<bundled {name}>")
