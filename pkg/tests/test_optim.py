import numpy as np
import pytest

from htsc.core.optim import Adam, AdamW, OptimState, adam_step, adamw_step
from htsc.core.tensor import Parameter, mul, sum as tsum
from htsc.utils.errors import ShapeError


def test_decoupled_decay_with_zero_gradient() -> None:
    theta = Parameter(np.array([1.0]), dtype=np.float64)
    adamw_step([theta], [np.zeros(1)], OptimState(lr=0.1, weight_decay=0.01))
    assert theta.data[0] == pytest.approx(0.999, abs=1e-12)


def test_zero_decay_matches_adam_bitwise() -> None:
    rng = np.random.default_rng(7)
    start = rng.normal(size=(3, 4))
    a = Parameter(start, dtype=np.float64)
    b = Parameter(start, dtype=np.float64)
    state_a = OptimState(lr=1e-2, weight_decay=0.0)
    state_b = OptimState(lr=1e-2, weight_decay=0.0)
    for _ in range(5):
        grad = rng.normal(size=(3, 4))
        adamw_step([a], [grad], state_a)
        adam_step([b], [grad], state_b)
    assert np.array_equal(a.data, b.data)


def test_quadratic_descent_is_monotone() -> None:
    theta = Parameter(np.array([1.0]), dtype=np.float64)
    optimizer = AdamW([theta], lr=0.1, weight_decay=0.0)
    previous = abs(theta.data[0])
    for _ in range(3):
        optimizer.zero_grad()
        tsum(mul(theta, theta)).backward()
        optimizer.step()
        assert abs(theta.data[0]) < previous
        previous = abs(theta.data[0])


def test_coupled_decay_goes_through_the_moments() -> None:
    theta = Parameter(np.array([1.0]), dtype=np.float64)
    state = OptimState(lr=0.1, weight_decay=0.5)
    adam_step([theta], [np.zeros(1)], state)
    # The first bias-corrected Adam step has magnitude lr regardless of gradient scale
    assert theta.data[0] == pytest.approx(0.9, abs=1e-6)
    assert state.m["#0"][0] == pytest.approx(0.05)


def test_gradient_shape_mismatch_raises() -> None:
    theta = Parameter(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        adamw_step([theta], [np.zeros(3)], OptimState(lr=0.1))


def test_missing_gradient_counts_as_zero() -> None:
    theta = Parameter(np.array([2.0]), dtype=np.float64)
    optimizer = Adam([theta], lr=0.1, weight_decay=0.0)
    optimizer.step()
    assert theta.data[0] == 2.0
    assert optimizer.state.step == 1


def test_linear_warmup_scales_the_rate() -> None:
    theta = Parameter(np.array([0.0]))
    optimizer = AdamW([theta], lr=1.0, weight_decay=0.0, warmup_steps=4)
    assert optimizer.current_lr() == pytest.approx(0.25)
    optimizer.step()
    assert optimizer.current_lr() == pytest.approx(0.5)


def test_moment_buffers_are_keyed_by_parameter_name() -> None:
    theta = Parameter(np.ones(2), name="enc.w")
    state = OptimState(lr=0.1)
    adamw_step([theta], [np.ones(2)], state)
    assert list(state.m) == ["enc.w"]
    assert state.step == 1
