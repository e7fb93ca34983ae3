import numpy as np
import pytest

from avogcl.optim import AdamState, adam_step


class TestAdam:
    def test_first_step_magnitude(self):
        # bias correction makes the very first update ~lr per coordinate
        param = np.zeros((3, 4), dtype=np.float32)
        grad = np.array([[1.0, -2.0, 0.5, 7.0]] * 3)
        adam_step(param, grad, AdamState.for_param(param), lr=0.01)
        mags = np.abs(param.astype(np.float64))
        assert (mags >= 0.999 * 0.01).all() and (mags <= 0.01).all()
        assert (np.sign(param) == -np.sign(grad).astype(np.float32)).all()

    def test_zero_gradient_is_noop(self):
        param = np.full((5,), 2.5, dtype=np.float32)
        state = AdamState.for_param(param)
        adam_step(param, np.zeros(5), state, lr=0.1)
        np.testing.assert_array_equal(param, np.full((5,), 2.5, dtype=np.float32))
        assert state.step == 1

    def test_converges_on_quadratic(self):
        param = np.array([1.0], dtype=np.float32)
        state = AdamState.for_param(param)
        for _ in range(100):
            adam_step(param, 2.0 * param.astype(np.float64), state, lr=0.1)
        assert abs(float(param[0])) < 0.05

    def test_shape_mismatch_rejected(self):
        param = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(ValueError):
            adam_step(param, np.zeros((2, 3)), AdamState.for_param(param), lr=0.1)

    def test_state_is_float32(self):
        param = np.zeros((4,), dtype=np.float32)
        state = AdamState.for_param(param)
        adam_step(param, np.ones(4), state, lr=0.01)
        assert state.m.dtype == np.float32 and state.v.dtype == np.float32
