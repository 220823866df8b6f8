"""Backend selection for the expression and integration kernels.

The compiled extension ``_ckernels`` is used when it imports; otherwise the
pure-Python ``_pykernels`` takes over. Setting ``VARLAB_KERNELS=python``
forces the fallback. ``BACKEND`` names the active one.
"""

from __future__ import annotations

import os

import numpy as np

from varlab import _pykernels
from varlab.errors import BlowUpError, SingularEvaluationError

if os.environ.get("VARLAB_KERNELS", "").lower() == "python":
    _impl = _pykernels
else:
    try:
        from varlab import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "compiled"

_MESSAGES = {
    1: "division by zero",
    2: "log of a non-positive number",
    3: "negative power of zero",
    4: "non-finite result",
}


def use(backend: str):
    """Switch backends at runtime (``"compiled"`` or ``"python"``); returns the previous name."""
    global _impl, BACKEND
    previous = BACKEND
    if backend == "python":
        _impl = _pykernels
    elif backend == "compiled":
        from varlab import _ckernels

        _impl = _ckernels
    else:
        raise ValueError(f"unknown backend {backend!r}")
    BACKEND = backend
    return previous


def compiled_available() -> bool:
    try:
        from varlab import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def _check(status: int, where: str = "") -> None:
    if status:
        raise SingularEvaluationError(_MESSAGES.get(status, f"status {status}") + where)


def values(prog, x: np.ndarray) -> np.ndarray:
    out = np.empty(prog.size)
    _check(_impl.values(prog, x, out))
    return out


def dual2(prog, x: np.ndarray, v: np.ndarray):
    val, d1, d2 = np.empty(prog.size), np.empty(prog.size), np.empty(prog.size)
    _check(_impl.dual2(prog, x, v, val, d1, d2))
    return val, d1, d2


def jacobian(prog, x: np.ndarray) -> np.ndarray:
    out = np.zeros((prog.size, prog.n))
    _check(_impl.jacobian(prog, x, out))
    return out


def rk4_affine(prog, m: int, x0, node_times, step_cell, coef, want_jacobians: bool = False):
    """Integrate the packed affine system on ``node_times``.

    Returns ``(states, dstart, dend, stepjac)``; ``stepjac`` is None unless
    requested. Raises BlowUpError or SingularEvaluationError on failure.
    """
    n = prog.n
    node_times = np.ascontiguousarray(node_times, dtype=np.float64)
    step_cell = np.ascontiguousarray(step_cell, dtype=np.int32)
    coef = np.ascontiguousarray(coef, dtype=np.float64)
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    nsteps = len(node_times) - 1
    states = np.empty((nsteps + 1, n))
    dstart = np.empty((nsteps, n))
    dend = np.empty((nsteps, n))
    stepjac = np.empty((nsteps if want_jacobians else 0, n, n))
    status, failed = _impl.rk4_affine(prog, n, m, x0, node_times, step_cell, coef, states, dstart, dend, stepjac)
    if status == 4:
        raise BlowUpError(float(node_times[failed]))
    if status:
        _check(status, f" during integration at t={node_times[failed]:.17g}")
    return states, dstart, dend, (stepjac if want_jacobians else None)
