"""Adam update rule against closed forms and an independent reference."""

import numpy as np
import pytest

from gridcast.engine import adam_step, init_adam


def reference_adam(p0, grad_fn, lr, beta1, beta2, eps, steps):
    """Independently coded scalar Adam trajectory."""
    p, m, v = float(p0), 0.0, 0.0
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    state = init_adam(params, lr=1e-2)
    adam_step(params, {"w": np.zeros(3)}, state)
    assert np.array_equal(params["w"], [1.0, -2.0, 3.0])
    assert state.t == 1


def test_first_step_moves_by_lr():
    # fresh state, g=1: m_hat = 1, v_hat = 1 -> update = lr/(1+eps)
    params = {"p": np.array([0.0])}
    state = init_adam(params, lr=1e-4)
    adam_step(params, {"p": np.array([1.0])}, state)
    assert params["p"][0] == pytest.approx(-1e-4, abs=1e-8)


def test_three_step_quadratic_matches_reference():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    params = {"p": np.array([1.0])}
    state = init_adam(params, lr=lr, beta1=b1, beta2=b2, eps=eps)
    for _ in range(3):
        g = 2.0 * params["p"]  # d/dp p^2
        adam_step(params, {"p": g.copy()}, state)
    expected = reference_adam(1.0, lambda p: 2.0 * p, lr, b1, b2, eps, steps=3)
    assert params["p"][0] == pytest.approx(expected, abs=1e-12)
    assert state.t == 3


def test_tensor_trajectory_matches_elementwise_reference():
    rng = np.random.default_rng(17)
    p0 = rng.standard_normal((3, 2))
    grads = [rng.standard_normal((3, 2)) for _ in range(5)]
    params = {"w": p0.copy()}
    state = init_adam(params, lr=3e-3)
    for g in grads:
        adam_step(params, {"w": g}, state)
    # elementwise scalar reference
    for idx in np.ndindex(3, 2):
        seq = iter([g[idx] for g in grads])
        ref = reference_adam(p0[idx], lambda p: next(seq), 3e-3, 0.9, 0.999, 1e-8, 5)
        assert params["w"][idx] == pytest.approx(ref, abs=1e-12)


def test_second_moment_stays_nonnegative_and_t_increments():
    params = {"w": np.zeros(4)}
    state = init_adam(params)
    rng = np.random.default_rng(3)
    for k in range(10):
        adam_step(params, {"w": rng.standard_normal(4)}, state)
        assert state.t == k + 1
        assert np.all(state.v["w"] >= 0)
        assert state.m["w"].shape == params["w"].shape


def test_shape_mismatch_rejected():
    params = {"w": np.zeros((2, 2))}
    state = init_adam(params)
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"w": np.zeros(3)}, state)


def test_single_precision_update_stays_single():
    params = {"w": np.zeros(3, dtype=np.float32)}
    state = init_adam(params, lr=1e-4)
    adam_step(params, {"w": np.ones(3, dtype=np.float32)}, state)
    assert params["w"].dtype == np.float32
    assert state.m["w"].dtype == np.float32
