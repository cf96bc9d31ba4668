import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dilatedrnn.errors import DimensionError, NumericError
from dilatedrnn.numeric import (
    Parameter,
    Rng,
    finite_diff_check,
    init_weights,
    matmul,
    rmsprop_step,
    sigmoid,
    softmax_cross_entropy,
    standard_normal_init,
)


class TestRng:
    def test_same_seed_same_stream(self):
        a = Rng(7, 1, 2).normal((3, 4))
        b = Rng(7, 1, 2).normal((3, 4))
        assert np.array_equal(a, b)

    def test_streams_are_independent(self):
        assert not np.array_equal(Rng(7, 1).uniform(8), Rng(7, 2).uniform(8))
        assert np.array_equal(Rng(7).child(3).uniform(5), Rng(7, 3).uniform(5))

    def test_normal_moments(self):
        z = Rng(0).normal(200_000)
        assert abs(z.mean()) < 0.01
        assert abs(z.std() - 1.0) < 0.01

    def test_odd_count_and_finite(self):
        z = Rng(1).normal((3, 5))
        assert z.shape == (3, 5)
        assert np.isfinite(z).all()

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            Rng(-1)


class TestMatmul:
    def test_identity(self):
        x = Rng(0).normal((3, 3))
        assert np.array_equal(matmul(np.eye(3), x), x)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
    @settings(max_examples=30, deadline=None)
    def test_matches_triple_loop(self, n, k, m, seed):
        rng = Rng(seed)
        a, b = rng.normal((n, k)), rng.normal((k, m))
        expected = np.zeros((n, m))
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for q in range(k):
                    acc += a[i, q] * b[q, j]
                expected[i, j] = acc
        assert np.array_equal(matmul(a, b), expected)


def test_standard_normal_init_is_finite():
    w = standard_normal_init((2, 2), Rng(0))
    assert w.shape == (2, 2) and np.isfinite(w).all()
    with pytest.raises(ValueError):
        standard_normal_init((0, 3), Rng(0))


def test_scaled_init_divides_same_draws_by_fan_in():
    a = init_weights((16, 3), Rng(2))
    b = init_weights((16, 3), Rng(2), "scaled_normal")
    assert np.array_equal(b, a / 4.0)
    with pytest.raises(ValueError):
        init_weights((2, 2), Rng(0), "glorot")


def test_sigmoid_extremes_do_not_overflow():
    x = np.array([-1000.0, -1.0, 0.0, 1.0, 1000.0])
    s = sigmoid(x)
    assert np.isfinite(s).all()
    assert s[2] == 0.5 and s[0] == 0.0 and s[-1] == 1.0
    assert math.isclose(s[3], 1 / (1 + math.exp(-1)))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_give_log_classes(self):
        loss, _ = softmax_cross_entropy(np.zeros((4, 8)), [0, 1, 2, 3])
        assert math.isclose(loss, math.log(8), rel_tol=1e-15)

    def test_empty_batch(self):
        loss, grad = softmax_cross_entropy(np.zeros((0, 3)), np.zeros(0, dtype=int))
        assert loss == 0.0 and grad.shape == (0, 3)

    def test_label_out_of_range(self):
        with pytest.raises(IndexError):
            softmax_cross_entropy(np.zeros((1, 3)), [3])

    def test_large_logits_stay_finite(self):
        loss, grad = softmax_cross_entropy(np.array([[1e4, 0.0, -1e4]]), [0])
        assert loss == 0.0 and np.isfinite(grad).all()

    def test_gradient_matches_finite_differences(self):
        rng = Rng(3)
        logits = Parameter("logits", rng.normal((5, 7)))
        labels = rng.integers(0, 7, 5)
        _, logits.grad[...] = softmax_cross_entropy(logits.value, labels)
        err = finite_diff_check(lambda: softmax_cross_entropy(logits.value, labels)[0], [logits])
        assert err <= 1e-7


class TestRmsprop:
    def test_single_step_matches_formula(self):
        p = Parameter("w", np.array([[1.0, -2.0]]))
        p.grad[...] = [[0.5, -4.0]]
        g = p.grad.copy()
        rmsprop_step(p, lr=0.01, decay=0.9, epsilon=1e-8)
        acc = (1.0 - 0.9) * g * g
        expected = np.array([[1.0, -2.0]]) - 0.01 * g / np.sqrt(acc + 1e-8)
        assert np.array_equal(p.value, expected)
        assert np.array_equal(p.rms, acc)
        assert not p.grad.any()
        assert p.version == 1

    def test_zero_gradient_leaves_value(self):
        p = Parameter("w", np.ones((2, 2)))
        rmsprop_step(p)
        assert np.array_equal(p.value, np.ones((2, 2)))

    def test_first_step_size_is_about_lr_over_sqrt_one_minus_decay(self):
        p = Parameter("w", np.zeros((1, 1)))
        p.grad[...] = 3.0
        rmsprop_step(p, lr=1e-3, decay=0.9)
        assert math.isclose(-p.value[0, 0], 1e-3 / math.sqrt(0.1), rel_tol=1e-6)

    @pytest.mark.parametrize("bad", [math.nan, math.inf])
    def test_non_finite_gradient_names_parameter(self, bad):
        p = Parameter("layer1.bias", np.zeros((1, 2)))
        p.grad[0, 1] = bad
        with pytest.raises(NumericError, match="layer1.bias"):
            rmsprop_step(p)

    def test_parameters_must_be_two_dimensional(self):
        with pytest.raises(DimensionError):
            Parameter("v", np.zeros(3))


def test_finite_diff_check_detects_wrong_gradient():
    p = Parameter("w", np.array([[0.3, -0.7]]))
    p.grad[...] = 2 * p.value  # d/dw sum(w^2)
    assert finite_diff_check(lambda: float((p.value**2).sum()), [p]) < 1e-9
    p.grad[0, 0] += 0.1
    assert finite_diff_check(lambda: float((p.value**2).sum()), [p]) > 1e-2
