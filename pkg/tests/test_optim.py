import numpy as np
import pytest

from rsnet.optim import OptimizerState, adamw_step, decay_conv_weights, scheduled_lr
from rsnet.tensor import Parameter


def _param(values, name: str) -> Parameter:
    return Parameter(np.asarray(values, dtype=np.float64), name=name)


def test_first_step_moves_by_learning_rate_times_sign():
    p = _param([1.0, 1.0], "w")
    p.grad = np.array([0.5, -2.0])
    state = OptimizerState(lr=0.1, weight_decay=0.0)

    adamw_step([p], state)

    np.testing.assert_allclose(p.data, [0.9, 1.1], atol=1e-7)
    assert state.step == 1


def test_decay_is_decoupled_and_skips_vectors():
    kernel = _param(np.ones((2, 2)), "conv.weight")
    gain = _param(np.ones(2), "norm.weight")
    state = OptimizerState(lr=0.1, weight_decay=0.1)

    adamw_step([kernel, gain], state, decay=decay_conv_weights)

    np.testing.assert_allclose(kernel.data, np.full((2, 2), 0.99))
    np.testing.assert_array_equal(gain.data, np.ones(2))


def test_moments_follow_parameter_names():
    p = _param([0.0], "w")
    p.grad = np.array([1.0])
    state = OptimizerState(lr=0.01)

    adamw_step([p], state)
    adamw_step([p], state)

    assert state.step == 2
    assert state.m["w"][0] == pytest.approx((1 - 0.937) * (1 + 0.937))
    assert state.v["w"][0] == pytest.approx((1 - 0.999) * (1 + 0.999))


def test_moment_shape_mismatch_is_reported():
    state = OptimizerState()
    state.m["w"] = np.zeros(3)
    state.v["w"] = np.zeros(3)

    with pytest.raises(ValueError, match="optimizer moments for w"):
        adamw_step([_param([1.0, 2.0], "w")], state)


@pytest.mark.parametrize("kwargs", [dict(lr=0.0), dict(beta1=1.0), dict(weight_decay=-1.0)])
def test_invalid_hyperparameters(kwargs):
    with pytest.raises(ValueError):
        OptimizerState(**kwargs)


def test_scheduled_lr_warms_up_then_decays():
    base = 0.01

    assert scheduled_lr(0, 100, base, warmup_steps=4) == pytest.approx(base / 4)
    assert scheduled_lr(3, 100, base, warmup_steps=4) == pytest.approx(base)
    assert scheduled_lr(4, 100, base, warmup_steps=4) == pytest.approx(base)
    assert scheduled_lr(100, 100, base, warmup_steps=4) == pytest.approx(base * 0.01)
    assert scheduled_lr(52, 100, base, warmup_steps=4) == pytest.approx(base * (1 - 0.5 * 0.99))


def test_scheduled_lr_without_known_length_is_constant():
    assert scheduled_lr(10, 0, 0.002) == 0.002
