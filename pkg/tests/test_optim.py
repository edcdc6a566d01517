import numpy as np
import pytest

from mimictts.errors import ContractError
from mimictts.optim import AdamState, adam_step, clip_global_norm, global_norm
from mimictts.tensor import Tensor


def tmap(**kwargs):
    return {k: Tensor(np.asarray(v, dtype=np.float64)) for k, v in kwargs.items()}


def test_clip_halves_single_gradient():
    clipped = clip_global_norm(tmap(g=[2.0]), 1.0)
    np.testing.assert_allclose(clipped["g"].data, [1.0])


def test_clip_under_threshold_is_identity():
    grads = tmap(a=[0.3], b=[0.4])  # global norm 0.5
    out = clip_global_norm(grads, 1.0)
    assert out is grads


def test_clip_norm_equals_min_of_norm_and_threshold():
    rng = np.random.default_rng(0)
    for _ in range(20):
        grads = {f"p{i}": Tensor(rng.standard_normal(rng.integers(1, 6))) for i in range(3)}
        n = global_norm(grads)
        for t in (0.5, 1.0, 2.0 * n + 1.0):
            clipped = clip_global_norm(grads, t)
            assert abs(global_norm(clipped) - min(n, t)) < 1e-9


def test_clip_is_exactly_idempotent():
    rng = np.random.default_rng(1)
    for _ in range(50):
        grads = {f"p{i}": Tensor(rng.standard_normal(4) * 3.0) for i in range(4)}
        once = clip_global_norm(grads, 1.0)
        twice = clip_global_norm(once, 1.0)
        for name in grads:
            np.testing.assert_array_equal(once[name].data, twice[name].data)


def test_clip_empty_map():
    assert clip_global_norm({}, 1.0) == {}


def test_adam_first_step_is_signed_learning_rate():
    for g in (0.37, -1.8, 4e3):
        params = tmap(w=[1.0])
        state = AdamState.for_params(params)
        adam_step(params, tmap(w=[g]), state, lr=0.001)
        # bias-corrected first step: -lr * g / (|g| + eps) ~= -lr * sign(g)
        assert params["w"].data[0] == pytest.approx(1.0 - 0.001 * np.sign(g), abs=1e-6)
        assert state.step_count == 1


def test_adam_zero_gradients_leave_params_bit_identical():
    rng = np.random.default_rng(2)
    params = {"w": Tensor(rng.standard_normal(7))}
    before = params["w"].data.copy()
    state = AdamState.for_params(params)
    for _ in range(5):
        adam_step(params, {"w": Tensor(np.zeros(7))}, state)
    np.testing.assert_array_equal(params["w"].data, before)
    assert state.step_count == 5


def test_adam_matches_reference_implementation():
    rng = np.random.default_rng(3)
    w = rng.standard_normal(5)
    params = {"w": Tensor(w.copy())}
    state = AdamState.for_params(params)
    m = np.zeros(5)
    v = np.zeros(5)
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    for t in range(1, 8):
        g = rng.standard_normal(5)
        adam_step(params, {"w": Tensor(g)}, state, lr=lr, beta1=b1, beta2=b2, eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(params["w"].data, w, rtol=1e-12)


def test_adam_shape_mismatch_rejected():
    params = tmap(w=[1.0, 2.0])
    state = AdamState.for_params(params)
    with pytest.raises(ContractError):
        adam_step(params, tmap(w=[1.0]), state)


def test_adam_second_moment_nonnegative():
    rng = np.random.default_rng(4)
    params = {"w": Tensor(rng.standard_normal(6))}
    state = AdamState.for_params(params)
    for _ in range(10):
        adam_step(params, {"w": Tensor(rng.standard_normal(6))}, state)
    assert np.all(state.second_moment["w"] >= 0)
