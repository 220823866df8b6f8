import numpy as np
import pytest

from varlab import kernels
from varlab.controlset import FiniteProduct
from varlab.fields import ControlAffineSystem
from varlab.flows import ControlSignal

BACKENDS = ["compiled", "python"] if kernels.compiled_available() else ["python"]


@pytest.fixture(params=BACKENDS)
def backend(request):
    previous = kernels.use(request.param)
    yield request.param
    kernels.use(previous)


@pytest.fixture
def worked():
    """No-drift system with g1 = (1, 0, -x2), g2 = (0, 1, 0) from (2, 0, 0)."""
    return ControlAffineSystem.from_strings(
        ["0", "0", "0"], [["1", "0", "-x2"], ["0", "1", "0"]], "x3", [2.0, 0.0, 0.0], 1.0
    )


@pytest.fixture
def worked_u():
    return ControlSignal.constant([-2.0, 0.0], 1.0)


@pytest.fixture
def worked_U():
    return FiniteProduct(([-4, -2, 0, 3], [-6, 0, 4, 7]))


@pytest.fixture
def poly3():
    """Non-nilpotent polynomial system used for order checks."""
    return ControlAffineSystem.from_strings(
        ["x2", "-x1", "x1*x2"], [["1", "0", "-x2"], ["0", "1", "x1^2"]], "x3", [0.3, -0.2, 0.1], 1.0
    )


@pytest.fixture
def quad2():
    """f = (x2^2, 0), g = (0, 1): [f,g] = (-2 x2, 0), [g,[f,g]] = (-2, 0)."""
    return ControlAffineSystem.from_strings(["x2^2", "0"], [["0", "1"]], "x1", [0.0, 0.5], 1.0)


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance") or __import__("sys").modules.get("tests.test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
