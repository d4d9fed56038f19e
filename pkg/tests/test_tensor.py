"""Tensor and autodiff contracts: frozen oracles plus property tests."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidiseq import tensor as T
from bidiseq.tensor import (DimensionError, InvalidArgumentError, Tensor,
                            backward, float64_mode, grad_check)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(a, b).values, b.values)

    def test_selector_row(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]]))
        np.testing.assert_array_equal(out.values, [[5.0]])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        # independent brute-force oracle
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).values
        np.testing.assert_allclose(got, expect, atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_batched_gradient(self):
        with float64_mode():
            a = Tensor(np.random.default_rng(1).normal(size=(2, 3, 4)), requires_grad=True)
            b = Tensor(np.random.default_rng(2).normal(size=(4, 5)), requires_grad=True)
            err = grad_check(lambda x, y: T.tensor_sum(T.tanh(T.matmul(x, y))), [a, b])
        assert err < 1e-6


class TestSoftmax:
    def test_uniform_input(self):
        out = T.softmax(Tensor([1.0, 1.0, 1.0]), axis=-1)
        np.testing.assert_allclose(out.values, [1 / 3] * 3, atol=1e-7)

    def test_large_input_stable(self):
        out = T.softmax(Tensor([0.0, 1e4]), axis=-1)
        assert np.all(np.isfinite(out.values))
        np.testing.assert_allclose(out.values, [0.0, 1.0], atol=1e-12)

    def test_matches_float64_formula(self):
        x = np.array([1.0, 2.0, 3.0])
        expect = np.exp(x.astype(np.float64))
        expect = expect / expect.sum()
        got = T.softmax(Tensor(x), axis=-1).values
        np.testing.assert_allclose(got, expect, atol=1e-6)

    def test_empty_axis_rejected(self):
        with pytest.raises(InvalidArgumentError):
            T.softmax(Tensor(np.zeros((2, 0))), axis=1)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=16))
    def test_slices_sum_to_one(self, xs):
        out = T.softmax(Tensor(xs), axis=-1)
        assert abs(out.values.sum() - 1.0) < 1e-6
        assert np.all(out.values >= 0)


class TestLayerNorm:
    def test_constant_slice_is_zero(self):
        x = Tensor(np.full((3, 4), 2.5))
        out = T.layer_norm(x, T.ones(4), T.zeros(4))
        np.testing.assert_allclose(out.values, 0.0, atol=1e-4)

    def test_two_point_slice(self):
        # mean 2, population std 1 -> normalized [-1, 1]
        out = T.layer_norm(Tensor([[1.0, 3.0]]), T.ones(2), T.zeros(2))
        np.testing.assert_allclose(out.values, [[-1.0, 1.0]], atol=1e-4)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(min_value=-100, max_value=100), min_size=2, max_size=12))
    def test_output_mean_near_zero(self, xs):
        n = len(xs)
        out = T.layer_norm(Tensor([xs]), T.ones(n), T.zeros(n))
        assert abs(out.values.mean()) < 1e-5

    def test_gradient(self):
        with float64_mode():
            x = Tensor(np.random.default_rng(3).normal(size=(2, 5)), requires_grad=True)
            g = Tensor(np.random.default_rng(4).normal(size=5), requires_grad=True)
            b = Tensor(np.random.default_rng(5).normal(size=5), requires_grad=True)
            err = grad_check(lambda *a: T.tensor_sum(T.tanh(T.layer_norm(*a))), [x, g, b])
        assert err < 1e-6


def smoothed_nll_oracle(logits, targets, eps, mask=None):
    """Direct float64 evaluation of the smoothed cross entropy."""
    logits = np.asarray(logits, dtype=np.float64)
    n, v = logits.shape
    lp = logits - logits.max(axis=1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
    total, count = 0.0, 0
    for i in range(n):
        if mask is not None and not mask[i]:
            continue
        q = np.full(v, eps / v)
        q[targets[i]] += 1.0 - eps
        total += -(q * lp[i]).sum()
        count += 1
    return total / count


class TestCrossEntropy:
    def test_uniform_logits_gives_log_v(self):
        out = T.cross_entropy(Tensor(np.zeros((2, 4))), [1, 3])
        np.testing.assert_allclose(out.values, np.log(4.0), atol=1e-6)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 50.0
        out = T.cross_entropy(Tensor(logits), [2])
        assert out.item() < 1e-6

    def test_matches_smoothed_oracle(self):
        logits = np.array([[0.3, -1.2, 2.0], [1.1, 0.0, -0.5]])
        expect = smoothed_nll_oracle(logits, [2, 0], 0.1)
        got = T.cross_entropy(Tensor(logits), [2, 0], label_smoothing=0.1)
        np.testing.assert_allclose(got.values, expect, atol=1e-6)

    def test_mask_excludes_padding(self):
        logits = np.array([[0.3, -1.2, 2.0], [9.0, 0.0, -0.5], [1.1, 0.0, -0.5]])
        mask = np.array([1.0, 0.0, 1.0])
        expect = smoothed_nll_oracle(logits, [2, 0, 0], 0.1, mask)
        got = T.cross_entropy(Tensor(logits), [2, 0, 0], label_smoothing=0.1, mask=mask)
        np.testing.assert_allclose(got.values, expect, atol=1e-6)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError, match="7"):
            T.cross_entropy(Tensor(np.zeros((1, 4))), [7])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.tensor_sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_quadratic(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        backward(T.tensor_sum(T.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(InvalidArgumentError):
            backward(Tensor([1.0, 2.0], requires_grad=True))

    def test_unused_parameter_keeps_none_grad(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        backward(T.tensor_sum(x))
        assert unused.grad is None  # read as zero by the optimizer

    def test_shared_subexpression_visited_once(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.mul(x, x)
        loss = T.tensor_sum(T.add(y, y))
        backward(loss)
        np.testing.assert_allclose(x.grad, [12.0])

    def test_forward_deterministic(self):
        rng = np.random.default_rng(7)
        a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
        one = T.matmul(Tensor(a), T.tanh(Tensor(b))).values
        two = T.matmul(Tensor(a), T.tanh(Tensor(b))).values
        assert one.tobytes() == two.tobytes()


class TestGradCheck:
    def test_identity_error_zero(self):
        # at 0 the +/-h evaluations are exact, so identity checks out exactly
        with float64_mode():
            x = Tensor(np.zeros(3), requires_grad=True)
            err = grad_check(lambda t: T.tensor_sum(t), [x])
        assert err == 0.0

    def test_tanh(self):
        with float64_mode():
            x = Tensor(np.random.default_rng(11).normal(size=6), requires_grad=True)
            err = grad_check(lambda t: T.tensor_sum(T.tanh(t)), [x])
        assert err < 1e-6

    def test_softmax_cross_entropy(self):
        with float64_mode():
            x = Tensor(np.random.default_rng(12).normal(size=(3, 5)), requires_grad=True)
            err = grad_check(
                lambda t: T.cross_entropy(t, [0, 2, 4], label_smoothing=0.1), [x])
        assert err < 1e-4

    def test_requires_float64(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(InvalidArgumentError):
            grad_check(lambda t: T.tensor_sum(t), [x])

    def test_composed_ops(self):
        with float64_mode():
            rng = np.random.default_rng(13)
            w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
            g = Tensor(rng.normal(size=3), requires_grad=True)
            b = Tensor(rng.normal(size=3), requires_grad=True)

            def f(w, x, g, b):
                h = T.layer_norm(T.sigmoid(T.matmul(x, w)), g, b)
                return T.cross_entropy(h, [1, 2], label_smoothing=0.05)

            err = grad_check(f, [w, x, g, b])
        assert err < 1e-4


class TestElementwise:
    def test_embedding_repeated_rows_accumulate(self):
        table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
        out = T.embedding(table, np.array([0, 2, 0]))
        backward(T.tensor_sum(out))
        np.testing.assert_array_equal(table.grad, [[2, 2], [0, 0], [1, 1]])

    def test_concat_split_gradient(self):
        with float64_mode():
            a = Tensor(np.random.default_rng(21).normal(size=(2, 3)), requires_grad=True)
            b = Tensor(np.random.default_rng(22).normal(size=(2, 2)), requires_grad=True)
            err = grad_check(
                lambda x, y: T.tensor_sum(T.tanh(T.concat([x, y], axis=1))), [a, b])
        assert err < 1e-6

    def test_dropout_scales_survivors(self):
        rng = np.random.default_rng(5)
        x = Tensor(np.ones(1000))
        out = T.dropout(x, 0.25, rng).values
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert 600 < kept.size < 900

    def test_dropout_disabled_without_rng(self):
        x = Tensor(np.ones(8))
        assert T.dropout(x, 0.5, None) is not None
        np.testing.assert_array_equal(T.dropout(x, 0.5, None).values, x.values)

    def test_values_finite_after_forward(self):
        rng = np.random.default_rng(31)
        x = Tensor(rng.normal(size=(4, 8)) * 100)
        for op in (lambda t: T.softmax(t, -1), T.tanh, T.sigmoid,
                   lambda t: T.layer_norm(t, T.ones(8), T.zeros(8))):
            assert np.all(np.isfinite(op(x).values))
