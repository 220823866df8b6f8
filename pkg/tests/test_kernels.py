import importlib.util
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from varlab import kernels
from varlab.exprcore import eval_dual, parse
from varlab.fields import ControlAffineSystem
from varlab.flows import ControlSignal, integrate

ROOT = Path(__file__).resolve().parents[1]


def test_env_forces_python_backend():
    env = dict(os.environ, VARLAB_KERNELS="python")
    out = subprocess.run(
        [sys.executable, "-c", "from varlab import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_use_switches_and_restores():
    previous = kernels.use("python")
    try:
        assert kernels.BACKEND == "python"
        if kernels.compiled_available():
            assert kernels.use("compiled") == "python"
            assert kernels.BACKEND == "compiled"
    finally:
        kernels.use(previous)
    with pytest.raises(ValueError):
        kernels.use("fortran")


def test_compiled_extension_built():
    # the editable install builds the extension; the fallback covers its absence
    assert kernels.compiled_available()


def test_backends_agree_on_trajectory():
    P = ControlAffineSystem.from_strings(
        ["x2", "-sin(x1)", "exp(x1)*x2"], [["1", "0", "-x2"], ["0", "1", "x1^2"]], "x3", [0.3, -0.2, 0.1], 1.0
    )
    u = ControlSignal([0.0, 0.4, 1.0], [[0.5, -1.0], [-0.25, 2.0]])
    finals = {}
    previous = kernels.BACKEND
    try:
        for b in ("python", "compiled") if kernels.compiled_available() else ("python",):
            kernels.use(b)
            tr = integrate(P, u, step=0.01, jacobians=True)
            finals[b] = (tr.final, tr.transport[0])
    finally:
        kernels.use(previous)
    if len(finals) == 2:
        np.testing.assert_allclose(finals["python"][0], finals["compiled"][0], rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(finals["python"][1], finals["compiled"][1], rtol=1e-12, atol=1e-14)


def test_backends_agree_on_dual(backend):
    e = parse("x1^3*cos(x2) - log(x1)/x2", 2)
    r = eval_dual(e, [1.3, 0.7], [0.2, -1.1])
    val, d1, d2 = r.value, r.d1, r.d2
    assert np.isfinite([val, d1, d2]).all()
    f = lambda s: e([1.3 + 0.2 * s, 0.7 - 1.1 * s])
    h = 1e-4
    assert d1 == pytest.approx((f(h) - f(-h)) / (2 * h), rel=1e-7)
    assert d2 == pytest.approx((f(h) - 2 * f(0) + f(-h)) / h**2, rel=1e-5)


def test_benchmark_smoke():
    spec = importlib.util.spec_from_file_location("bench_kernels", ROOT / "benchmarks" / "bench_kernels.py")
    bench = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(bench)
    res = bench.run(repeat=1, quick=True)
    assert set(res) == {"rk4 + jacobians", "goh ladder", "multiplier search"}
    for times in res.values():
        assert all(t > 0 for t in times.values())
