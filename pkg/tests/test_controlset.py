import numpy as np
import pytest

from varlab.controlset import Box, ExplicitList, FiniteProduct
from varlab.errors import DimensionError


def test_finite_product():
    U = FiniteProduct(([3, -4, 0, -2], [-6, 0, 7, 4]))
    assert U.sets[0] == (-4.0, -2.0, 0.0, 3.0)
    assert U.contains([-2, 0]) and not U.contains([-1, 0]) and not U.contains([-2])
    assert U.shifts(np.array([-2.0, 0.0]), 0) == ([2.0, 5.0], [2.0])
    assert U.shifts(np.array([-2.0, 0.0]), 1) == ([4.0, 7.0], [6.0])
    assert U.shifts(np.array([-1.0, 0.0]), 0) == ([], [])
    value, argmax = U.maximize([1.0, 0.0])
    assert value == 3.0 and sorted(p[1] for p in argmax) == [-6.0, 0.0, 4.0, 7.0]
    assert len(U.points()) == 16
    assert U.to_dict()["kind"] == "finite_product"
    with pytest.raises(ValueError):
        FiniteProduct(([1], []))


def test_box():
    U = Box([-1, -1], [1, 2])
    assert U.contains([1, 2]) and not U.contains([1.1, 0])
    value, argmax = U.maximize([2.0, -1.0])
    assert value == 3.0 and [p.tolist() for p in argmax] == [[1.0, -1.0]]
    assert len(U.maximize([0.0, 1.0])[1]) == 2
    assert len(U.points()) == 4
    with pytest.raises(ValueError):
        Box([1], [0])
    with pytest.raises(DimensionError):
        Box([0, 0], [1])


def test_explicit_list():
    U = ExplicitList([[0, 0], [1, 0], [-2, 0], [1, 1]])
    assert U.shifts(np.array([0.0, 0.0]), 0) == ([1.0], [2.0])
    assert U.shifts(np.array([0.0, 0.0]), 1) == ([], [])
    value, argmax = U.maximize([1.0, 1.0])
    assert value == 2.0 and [p.tolist() for p in argmax] == [[1.0, 1.0]]
    with pytest.raises(DimensionError):
        ExplicitList([[0, 0], [1]])
    with pytest.raises(ValueError):
        ExplicitList([])
