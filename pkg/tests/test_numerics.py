import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fedrule.numerics import AdamState, ShapeError, adam_step, matmul, relu, sgd_step, sigmoid


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            s = 0.0
            for k in range(a.shape[1]):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, np.eye(2)), a)

    def test_row_by_column(self):
        assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("n", [1, 13, 50])
    def test_square_against_triple_loop(self, n):
        rng = np.random.default_rng(n)
        a, b = rng.normal(size=(n, n)), rng.normal(size=(n, n))
        np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=0, atol=1e-12)
        np.testing.assert_array_equal(matmul(a, np.eye(n)), a)
        np.testing.assert_array_equal(matmul(np.eye(n), a), a)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))


class TestActivations:
    def test_relu(self):
        assert relu([-1.0, 0.0, 2.0]).tolist() == [0.0, 0.0, 2.0]

    def test_sigmoid_zero(self):
        assert sigmoid([0.0]).tolist() == [0.5]

    def test_sigmoid_symmetry(self):
        x = np.random.default_rng(1).uniform(-30, 30, size=1000)
        np.testing.assert_allclose(sigmoid(-x), 1 - sigmoid(x), rtol=0, atol=1e-12)

    def test_sigmoid_strictly_inside_unit_interval(self):
        y = sigmoid(np.array([-1e4, -800.0, -40.0, 40.0, 800.0, 1e4]))
        assert np.all(y > 0) and np.all(y < 1)

    @given(arrays(np.float64, st.integers(2, 30), elements=finite))
    def test_sigmoid_monotone(self, x):
        xs = np.sort(x)
        assert np.all(np.diff(sigmoid(xs)) >= 0)

    @given(arrays(np.float64, st.integers(1, 30), elements=finite))
    def test_relu_idempotent(self, x):
        np.testing.assert_array_equal(relu(relu(x)), relu(x))


class TestAdam:
    def test_zero_gradient_fresh_state(self):
        p = np.array([[1.0, -2.0]])
        st_ = AdamState.zeros_like(p)
        np.testing.assert_array_equal(adam_step(p, np.zeros_like(p), st_, 0.1), p)
        assert int(st_.step) == 1

    @settings(max_examples=50)
    @given(st.integers(0, 1000), arrays(np.float64, 4, elements=finite))
    def test_zero_gradient_with_zero_moments_any_step(self, step, p):
        state = AdamState(np.zeros(4), np.zeros(4), np.asarray(step))
        np.testing.assert_array_equal(adam_step(p, np.zeros(4), state, 0.1), p)

    def test_first_step_closed_form(self):
        # step 1: m_hat = g, v_hat = g^2  =>  p - lr * g / (|g| + eps)
        g = np.array([0.5, -3.0, 1e-3])
        p = np.array([1.0, 1.0, 1.0])
        out = adam_step(p, g, AdamState.zeros_like(p), 0.1)
        np.testing.assert_allclose(out, p - 0.1 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)

    def test_descends_quadratic(self):
        w = np.array([1.0])
        state = AdamState.zeros_like(w)
        for _ in range(100):
            w = adam_step(w, 2 * w, state, 0.1)
        assert abs(w[0]) < 0.1

    def test_per_client_step_counters(self):
        p = np.ones((2, 3))
        state = AdamState.zeros_like(p, n_clients=2)
        state.step[1] = 5
        g = np.full((2, 3), 0.2)
        out = adam_step(p, g, state, 0.1)
        # bias correction makes the first Adam step magnitude lr regardless of step count
        np.testing.assert_allclose(out[0], 1 - 0.1 * 0.2 / (0.2 + 1e-8))
        assert state.step.tolist() == [1, 6]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adam_step(np.ones(3), np.ones(2), AdamState.zeros_like(np.ones(3)), 0.1)


class TestSgd:
    def test_zero_rate(self):
        p = np.array([1.0, 2.0])
        np.testing.assert_array_equal(sgd_step(p, np.array([5.0, 6.0]), 0.0), p)

    def test_single(self):
        assert sgd_step(np.array([1.0]), np.array([2.0]), 0.5).tolist() == [0.0]

    def test_sequence_equals_loop(self):
        rng = np.random.default_rng(3)
        p = rng.normal(size=(3, 2))
        grads = rng.normal(size=(6, 3, 2))
        expected = p.copy()
        for g in grads:
            for idx in np.ndindex(expected.shape):
                expected[idx] = expected[idx] - 0.3 * g[idx]
        out = p
        for g in grads:
            out = sgd_step(out, g, 0.3)
        np.testing.assert_array_equal(out, expected)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            sgd_step(np.ones(3), np.ones(4), 0.1)
