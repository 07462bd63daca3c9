"""Tensor ops: forward contracts and gradient checks against finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntrd import tensor as T
from ntrd.errors import ContractError, ShapeError
from ntrd.tensor import Tape, Tensor, backward

from .oracles import grad_check


def rng():
    return np.random.default_rng(0)


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, b)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])

    def test_unit_vector_selection(self):
        out = T.matmul(Tensor([[1.0, 0.0]]), Tensor([[2.0], [5.0]]))
        np.testing.assert_array_equal(out.data, [[2.0]])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_matches_finite_differences(self):
        r = rng()
        a = Tensor(r.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(r.normal(size=(4, 2)), requires_grad=True)

        def loss(record):
            out = T.reduce_sum(T.matmul(a, b))
            return out if record else out.item()

        grad_check(loss, [a, b], rtol=1e-6, atol=1e-9)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5])

    def test_large_input_no_overflow(self):
        out = T.softmax(Tensor([1000.0, 0.0]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_matches_high_precision_evaluation(self):
        # frozen from a 50-digit exp-normalize evaluation
        expected = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219]
        out = T.softmax(Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, expected, rtol=1e-12)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_sums_to_one(self, xs):
        out = T.softmax(Tensor(xs))
        assert abs(out.data.sum() - 1.0) < 1e-6
        assert (out.data >= 0).all()

    def test_gradient(self):
        x = Tensor(rng().normal(size=(2, 5)), requires_grad=True)
        w = rng().normal(size=(2, 5))

        def loss(record):
            out = T.reduce_sum(T.mul(T.softmax(x, axis=-1), Tensor(w)))
            return out if record else out.item()

        grad_check(loss, [x])


class TestLayerNorm:
    def test_constant_vector_is_zeroed(self):
        g = Tensor(np.ones(4))
        b = Tensor(np.zeros(4))
        out = T.layer_norm(Tensor([3.0, 3.0, 3.0, 3.0]), g, b)
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-12)

    def test_already_normalized(self):
        g = Tensor(np.ones(2))
        b = Tensor(np.zeros(2))
        out = T.layer_norm(Tensor([1.0, -1.0]), g, b, eps=1e-10)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_gradient(self):
        r = rng()
        x = Tensor(r.normal(size=(2, 8)), requires_grad=True)
        g = Tensor(r.normal(size=8), requires_grad=True)
        b = Tensor(r.normal(size=8), requires_grad=True)
        w = r.normal(size=(2, 8))

        def loss(record):
            out = T.reduce_sum(T.mul(T.layer_norm(x, g, b), Tensor(w)))
            return out if record else out.item()

        grad_check(loss, [x, g, b], rtol=1e-5)


class TestCrossEntropy:
    def test_certain_prediction_near_zero_loss(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 1e6
        out = T.cross_entropy(Tensor(logits), [2])
        assert out.item() < 1e-6

    def test_uniform_logits_give_log_n(self):
        for n in (2, 5, 7):
            out = T.cross_entropy(Tensor(np.zeros((3, n))), [0, 1, n - 1])
            assert abs(out.item() - math.log(n)) < 1e-9

    def test_matches_independent_log_sum_exp(self):
        r = rng()
        logits = r.normal(size=(4, 7))
        targets = [int(t) for t in r.integers(0, 7, size=4)]
        # independent evaluation: direct log-sum-exp per row
        expected = 0.0
        for i, t in enumerate(targets):
            row = logits[i]
            expected += -(row[t] - np.log(np.exp(row - row.max()).sum()) - row.max())
        expected /= 4
        out = T.cross_entropy(Tensor(logits), targets)
        assert abs(out.item() - expected) < 1e-9

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            T.cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_all_positions_masked_is_zero_with_zero_grad(self):
        x = Tensor(rng().normal(size=(2, 3)), requires_grad=True)
        with Tape():
            out = T.cross_entropy(x, [0, 1], mask=[False, False])
            backward(out)
        assert out.item() == 0.0
        np.testing.assert_array_equal(x.grad, np.zeros((2, 3)))

    def test_gradient_with_mask(self):
        r = rng()
        x = Tensor(r.normal(size=(5, 6)), requires_grad=True)
        targets = [0, 3, 1, 5, 2]
        mask = [True, False, True, True, False]

        def loss(record):
            out = T.cross_entropy(x, targets, mask=mask)
            return out if record else out.item()

        grad_check(loss, [x])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(rng().normal(size=(3, 2)), requires_grad=True)
        with Tape():
            backward(T.reduce_sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_zero_times_x_gives_zeros(self):
        x = Tensor(rng().normal(size=(4,)), requires_grad=True)
        with Tape():
            backward(T.reduce_sum(T.scale(x, 0.0)))
        np.testing.assert_array_equal(x.grad, np.zeros(4))

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        with Tape():
            y = T.add(x, x)
            with pytest.raises(ContractError):
                backward(y)

    def test_disconnected_loss_rejected(self):
        with Tape():
            with pytest.raises(ContractError):
                backward(Tensor(1.0))

    def test_reused_tensor_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            backward(T.reduce_sum(T.add(T.mul(x, x), x)))  # d/dx (x^2 + x) = 2x + 1
        np.testing.assert_allclose(x.grad, [5.0])

    def test_grad_only_on_requires_grad(self):
        x = Tensor([1.0])
        assert x.grad is None
        y = Tensor([1.0], requires_grad=True)
        assert y.grad is not None and y.grad.shape == (1,)


class TestShapes:
    def test_concat_and_gather_gradients(self):
        r = rng()
        a = Tensor(r.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(r.normal(size=(4, 3)), requires_grad=True)
        w = r.normal(size=(3, 3))

        def loss(record):
            cat = T.concat_rows([a, b])
            picked = T.gather_rows(cat, [0, 5, 1, 1])
            out = T.reduce_sum(T.mul(T.matmul(picked, Tensor(w)), picked))
            return out if record else out.item()

        grad_check(loss, [a, b])

    def test_concat_cols_gradient(self):
        r = rng()
        a = Tensor(r.normal(size=(2, 2)), requires_grad=True)
        b = Tensor(r.normal(size=(2, 3)), requires_grad=True)
        w = r.normal(size=(2, 5))

        def loss(record):
            out = T.reduce_sum(T.mul(T.concat_cols([a, b]), Tensor(w)))
            return out if record else out.item()

        grad_check(loss, [a, b])

    def test_broadcast_add_bias(self):
        r = rng()
        x = Tensor(r.normal(size=(3, 4)), requires_grad=True)
        bias = Tensor(r.normal(size=(4,)), requires_grad=True)
        w = r.normal(size=(3, 4))

        def loss(record):
            out = T.reduce_sum(T.mul(T.add(x, bias), Tensor(w)))
            return out if record else out.item()

        grad_check(loss, [x, bias])


class TestActivations:
    def test_gradients(self):
        r = rng()
        for fn in (T.relu, T.tanh, T.sigmoid, T.log_softmax):
            x = Tensor(r.normal(size=(3, 4)) + 0.1, requires_grad=True)
            w = r.normal(size=(3, 4))

            def loss(record):
                out = T.reduce_sum(T.mul(fn(x), Tensor(w)))
                return out if record else out.item()

            grad_check(loss, [x])


class TestDeterminism:
    def test_ops_bitwise_reproducible(self):
        def run():
            r = np.random.default_rng(7)
            x = Tensor(r.normal(size=(4, 4)))
            y = Tensor(r.normal(size=(4, 4)))
            return T.softmax(T.matmul(x, y)).data

        np.testing.assert_array_equal(run(), run())
