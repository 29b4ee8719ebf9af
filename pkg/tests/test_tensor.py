"""Autodiff engine: forward values, gradients vs finite differences."""

import numpy as np
import pytest

from tcrlab.errors import ShapeError
from tcrlab.tensor import (
    ComputeTape,
    Tensor,
    add,
    attn_softmax,
    concat,
    cross_entropy,
    dropout,
    embedding,
    gelu,
    layer_norm,
    matmul,
    mean_,
    mul,
    reshape,
    slice_axis,
    softmax_lastdim,
    sub,
    sum_,
    transpose_last2,
)

from conftest import assert_grads_match, max_rel_err, numeric_grad


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])

    def test_projector_selects_row(self):
        p = Tensor([[1.0, 0.0], [0.0, 0.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(matmul(p, b).data, [[5, 6], [0, 0]])

    def test_gradcheck_3x4_by_4x2(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        assert_grads_match(lambda x, y: sum_(matmul(x, y)), [a, b])

    def test_gradcheck_batched(self, rng):
        a = rng.normal(size=(2, 3, 4))
        b = rng.normal(size=(2, 4, 3))
        assert_grads_match(lambda x, y: sum_(matmul(x, y)), [a, b])

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


class TestSoftmax:
    def test_uniform_on_zeros(self):
        out = softmax_lastdim(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-7)

    def test_max_subtraction_stability(self):
        out = softmax_lastdim(Tensor([1000.0, 0.0]))
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)
        assert np.isfinite(out.data).all()

    def test_rows_sum_to_one(self, rng):
        out = softmax_lastdim(Tensor(rng.normal(size=(5, 7))))
        assert (out.data >= 0).all()
        np.testing.assert_allclose(out.data.sum(axis=1), np.ones(5), atol=1e-6)

    def test_nan_input_raises(self):
        with pytest.raises(FloatingPointError):
            softmax_lastdim(Tensor([np.nan, 0.0]))

    def test_gradcheck(self, rng):
        x = rng.normal(size=(6,))
        w = rng.normal(size=(6,))
        assert_grads_match(
            lambda t: sum_(mul(softmax_lastdim(t), Tensor(w, dtype=np.float64))),
            [x])


class TestMaskedSoftmax:
    def test_masked_columns_exactly_zero(self, rng):
        scores = Tensor(rng.normal(size=(2, 4)))
        mask = np.array([[1, 1, 0, 1], [1, 0, 0, 1]], dtype=np.uint8)
        out = attn_softmax(scores, mask).data
        assert out[0, 2] == 0.0
        assert out[1, 1] == 0.0 and out[1, 2] == 0.0
        np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0], atol=1e-6)

    def test_fully_masked_row_is_all_zero(self, rng):
        scores = Tensor(rng.normal(size=(1, 3)))
        out = attn_softmax(scores, np.zeros((1, 3), dtype=np.uint8)).data
        np.testing.assert_array_equal(out, np.zeros((1, 3)))

    def test_mask_broadcasts_over_heads_and_queries(self, rng):
        scores = Tensor(rng.normal(size=(2, 2, 3, 4)))
        mask = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=np.uint8)
        out = attn_softmax(scores, mask).data
        assert (out[0, :, :, 3] == 0.0).all()
        assert (out[1, :, :, 2:] == 0.0).all()

    def test_gradcheck_respects_mask(self, rng):
        x = rng.normal(size=(2, 5))
        w = rng.normal(size=(2, 5))
        mask = np.array([[1, 1, 1, 0, 1], [1, 1, 1, 1, 1]], dtype=np.uint8)
        assert_grads_match(
            lambda t: sum_(mul(attn_softmax(t, mask), Tensor(w, dtype=np.float64))),
            [x])


class TestLayerNorm:
    def test_constant_slice_maps_to_zero(self):
        x = Tensor([[5.0, 5.0, 5.0, 5.0]])
        g = Tensor(np.ones(4))
        b = Tensor(np.zeros(4))
        np.testing.assert_allclose(layer_norm(x, g, b).data, np.zeros((1, 4)),
                                   atol=1e-3)

    def test_symmetric_pair(self):
        x = Tensor([[1.0, -1.0]])
        out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-3)

    def test_gradcheck_all_inputs(self, rng):
        x = rng.normal(size=(3, 5))
        gain = rng.normal(size=(5,)) + 1.0
        bias = rng.normal(size=(5,))
        w = rng.normal(size=(3, 5))
        assert_grads_match(
            lambda t, g, b: sum_(mul(layer_norm(t, g, b),
                                     Tensor(w, dtype=np.float64))),
            [x, gain, bias])

    def test_gain_bias_shape_error(self):
        with pytest.raises(ShapeError):
            layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)),
                       Tensor(np.zeros(4)))


class TestGelu:
    def test_zero_fixed_point(self):
        assert gelu(Tensor([0.0])).data[0] == 0.0

    def test_large_positive_passthrough(self):
        np.testing.assert_allclose(gelu(Tensor([10.0])).data, [10.0], atol=1e-6)

    def test_gradcheck(self, rng):
        x = rng.normal(size=(4, 3))
        assert_grads_match(lambda t: sum_(gelu(t)), [x])


class TestCrossEntropy:
    def test_confident_correct_is_tiny(self):
        loss = cross_entropy(Tensor([[10.0, -10.0]]), [0])
        assert loss.item() < 1e-4

    def test_uniform_logits_give_ln4(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        np.testing.assert_allclose(loss.item(), np.log(4.0), rtol=1e-6)

    def test_all_ignored_returns_zero(self):
        loss = cross_entropy(Tensor(np.ones((2, 3))), [-100, -100])
        assert loss.item() == 0.0

    def test_ignored_rows_get_zero_grad(self, rng):
        logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with ComputeTape() as tape:
            loss = cross_entropy(logits, [1, -100, 2])
            tape.backward(loss)
        np.testing.assert_array_equal(logits.grad[1], np.zeros(4))
        assert np.abs(logits.grad[[0, 2]]).sum() > 0

    def test_out_of_range_target_raises(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((1, 3))), [3])

    def test_gradcheck(self, rng):
        logits = rng.normal(size=(4, 5))
        targets = [0, 2, -100, 4]
        assert_grads_match(lambda t: cross_entropy(t, targets), [logits])


class TestStructuralOps:
    def test_concat_and_slice_roundtrip(self, rng):
        a = rng.normal(size=(2, 3)).astype(np.float32)
        b = rng.normal(size=(2, 2)).astype(np.float32)
        cat = concat([Tensor(a), Tensor(b)], axis=1)
        np.testing.assert_array_equal(slice_axis(cat, 1, 0, 3).data, a)
        np.testing.assert_array_equal(slice_axis(cat, 1, 3, 5).data, b)

    def test_concat_gradcheck(self, rng):
        a = rng.normal(size=(2, 3))
        b = rng.normal(size=(2, 2))
        w = rng.normal(size=(2, 5))
        assert_grads_match(
            lambda x, y: sum_(mul(concat([x, y], axis=1),
                                  Tensor(w, dtype=np.float64))),
            [a, b])

    def test_slice_gradient_is_zero_padded(self, rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        with ComputeTape() as tape:
            tape.backward(sum_(slice_axis(x, 0, 1, 2)))
        expected = np.zeros((3, 4), dtype=np.float32)
        expected[1] = 1.0
        np.testing.assert_array_equal(x.grad, expected)

    def test_transpose_gradcheck(self, rng):
        x = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(2, 4, 3))
        assert_grads_match(
            lambda t: sum_(mul(transpose_last2(t), Tensor(w, dtype=np.float64))),
            [x])

    def test_reshape_gradcheck(self, rng):
        x = rng.normal(size=(2, 6))
        w = rng.normal(size=(3, 4))
        assert_grads_match(
            lambda t: sum_(mul(reshape(t, (3, 4)), Tensor(w, dtype=np.float64))),
            [x])

    def test_bias_add_gradient_sums_rows(self, rng):
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with ComputeTape() as tape:
            tape.backward(sum_(add(x, b)))
        np.testing.assert_allclose(b.grad, np.full(3, 4.0), rtol=1e-6)

    def test_add_shape_error(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


class TestEmbedding:
    def test_gather_values(self, rng):
        table = Tensor(rng.normal(size=(6, 4)).astype(np.float32))
        ids = np.array([[0, 5], [2, 2]])
        out = embedding(table, ids)
        np.testing.assert_array_equal(out.data[0, 1], table.data[5])
        np.testing.assert_array_equal(out.data[1, 0], table.data[2])

    def test_repeated_ids_accumulate(self):
        table = Tensor(np.zeros((3, 2)), requires_grad=True)
        ids = np.array([1, 1, 1, 0])
        with ComputeTape() as tape:
            tape.backward(sum_(embedding(table, ids)))
        np.testing.assert_array_equal(
            table.grad, [[1.0, 1.0], [3.0, 3.0], [0.0, 0.0]])


class TestGraphMechanics:
    def test_diamond_accumulates_additively(self, rng):
        xv = rng.normal(size=(5,))
        x = Tensor(xv, requires_grad=True, dtype=np.float64)
        with ComputeTape() as tape:
            # f(x) = sum(x*x + x) so df/dx = 2x + 1
            tape.backward(sum_(add(mul(x, x), x)))
        np.testing.assert_allclose(x.grad, 2 * xv + 1, rtol=1e-12)

    def test_unreached_branch_gets_no_grad(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with ComputeTape() as tape:
            mul(y, 2.0)  # recorded, but not part of the loss
            tape.backward(sum_(x))
        assert x.grad is not None
        assert y.grad is None

    def test_nested_tapes_are_independent(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with ComputeTape() as outer:
            a = mul(x, 2.0)
            with ComputeTape() as inner:
                b = mul(x, 3.0)
                inner.backward(sum_(b))
            inner_grad = x.grad.copy()
            x.grad = None
            outer.backward(sum_(a))
        np.testing.assert_allclose(inner_grad, np.full(3, 3.0))
        np.testing.assert_allclose(x.grad, np.full(3, 2.0))

    def test_no_tape_forward_records_nothing(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        out = mul(x, 2.0)
        assert out.requires_grad
        assert x.grad is None

    def test_forward_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            with ComputeTape() as tape:
                out = sum_(gelu(matmul(x, w)))
                tape.backward(out)
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)

    def test_finite_grads_for_finite_inputs(self, rng):
        x = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
        g = Tensor(np.ones(8), requires_grad=True)
        b = Tensor(np.zeros(8), requires_grad=True)
        with ComputeTape() as tape:
            h = layer_norm(gelu(x), g, b)
            tape.backward(mean_(softmax_lastdim(h)))
        for t in (x, g, b):
            assert np.isfinite(t.grad).all()


class TestDropout:
    def test_identity_when_not_training(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        out = dropout(x, 0.5, np.random.default_rng(0), training=False)
        assert out is x

    def test_identity_at_p_zero(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        out = dropout(x, 0.0, np.random.default_rng(0), training=True)
        assert out is x

    def test_inverted_scaling_preserves_mean(self):
        x = Tensor(np.ones((200, 200)))
        out = dropout(x, 0.25, np.random.default_rng(3), training=True)
        dropped = float((out.data == 0).mean())
        assert abs(dropped - 0.25) < 0.02
        assert abs(out.data.mean() - 1.0) < 0.02

    def test_gradient_uses_same_mask(self):
        x = Tensor(np.ones((50, 50)), requires_grad=True)
        with ComputeTape() as tape:
            out = dropout(x, 0.5, np.random.default_rng(9), training=True)
            tape.backward(sum_(out))
        np.testing.assert_array_equal((x.grad == 0), (out.data == 0))


class TestReductions:
    def test_sub_and_neg(self, rng):
        a, b = rng.normal(size=(3,)), rng.normal(size=(3,))
        np.testing.assert_allclose(sub(Tensor(a), Tensor(b)).data,
                                   (a - b).astype(np.float32), rtol=1e-6)
        np.testing.assert_allclose((-Tensor(a)).data, (-a).astype(np.float32),
                                   rtol=1e-6)

    def test_mean_gradient(self, rng):
        x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
        with ComputeTape() as tape:
            tape.backward(mean_(x))
        np.testing.assert_allclose(x.grad, np.full((2, 5), 0.1), rtol=1e-6)

    def test_float32_stays_float32(self, rng):
        x = Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)
        with ComputeTape() as tape:
            out = sum_(gelu(matmul(x, x)))
            tape.backward(out)
        assert out.data.dtype == np.float32
        assert x.grad.dtype == np.float32
