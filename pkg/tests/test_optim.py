"""Adaptive-moment optimizer and gradient clipping."""

import numpy as np
import pytest

from dta.errors import ShapeError, TrainingError
from dta.nn.optim import OptimizerState, adam_update, clip_global_norm


def test_zero_gradients_leave_params_unchanged():
    state = OptimizerState(learning_rate=0.1)
    params = {"w": np.array([1.0, -2.0])}
    adam_update(state, params, {"w": np.zeros(2)})
    assert np.array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1


def test_first_step_moves_by_learning_rate():
    # bias correction makes the first update exactly -lr * g / (|g| + eps)
    state = OptimizerState(learning_rate=0.05)
    params = {"w": np.array([0.0])}
    adam_update(state, params, {"w": np.array([1.0])})
    assert params["w"][0] == pytest.approx(-0.05, rel=1e-6)


def test_descent_on_quadratic():
    state = OptimizerState(learning_rate=0.1)
    params = {"w": np.array([1.0])}
    values = [abs(params["w"][0])]
    for _ in range(10):
        adam_update(state, params, {"w": 2.0 * params["w"]})
        values.append(abs(params["w"][0]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_deterministic_given_state():
    def run():
        state = OptimizerState(learning_rate=0.01)
        params = {"w": np.linspace(-1, 1, 5)}
        for i in range(5):
            adam_update(state, params, {"w": np.sin(params["w"] + i)})
        return params["w"]

    assert np.array_equal(run(), run())


def test_step_counter_increments_once_per_call():
    state = OptimizerState()
    params = {"a": np.zeros(2), "b": np.zeros(3)}
    adam_update(state, params, {"a": np.ones(2), "b": np.ones(3)})
    assert state.step == 1


def test_nonfinite_gradient_raises_with_name():
    state = OptimizerState()
    with pytest.raises(TrainingError, match="w_bad"):
        adam_update(state, {"w_bad": np.zeros(2)}, {"w_bad": np.array([1.0, np.nan])})


def test_gradient_shape_mismatch():
    state = OptimizerState()
    with pytest.raises(ShapeError):
        adam_update(state, {"w": np.zeros(2)}, {"w": np.zeros(3)})


def test_clip_global_norm_scales_in_place():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    pre = clip_global_norm(grads, 1.0)
    assert pre == pytest.approx(5.0)
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    assert total == pytest.approx(1.0)


def test_clip_global_norm_noop_below_threshold():
    grads = {"a": np.array([0.3, 0.4])}
    pre = clip_global_norm(grads, 5.0)
    assert pre == pytest.approx(0.5)
    assert np.array_equal(grads["a"], [0.3, 0.4])
