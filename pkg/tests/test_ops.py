"""Plain-array helper ops."""

import numpy as np
import pytest

from dta.errors import ShapeError
from dta.nn.ops import linear, mse


def test_linear_identity():
    x = np.array([3.0, -1.0])
    assert np.array_equal(linear(np.eye(2), np.zeros(2), x), x)


def test_linear_zero_weights_returns_bias():
    b = np.array([1.5, -2.0, 0.25])
    assert np.array_equal(linear(np.zeros((3, 2)), b, np.array([9.0, 9.0])), b)


def test_linear_hand_value():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = linear(W, np.array([1.0, 1.0]), np.array([1.0, 1.0]))
    assert np.array_equal(out, [4.0, 8.0])


def test_linear_shape_error():
    with pytest.raises(ShapeError):
        linear(np.eye(2), np.zeros(2), np.zeros(3))


def test_mse_zero_on_equal():
    v = np.arange(6.0).reshape(2, 3)
    assert mse(v, v) == 0.0


def test_mse_unit_offset():
    v = np.zeros((4, 5))
    assert mse(v + 1.0, v) == pytest.approx(1.0)


def test_mse_hand_value():
    assert mse([0.0, 2.0], [1.0, 0.0]) == pytest.approx(2.5)


def test_mse_shape_error():
    with pytest.raises(ShapeError):
        mse(np.zeros(3), np.zeros(4))
