"""Forward semantics of the tensor primitives: hand-computed cases, shape
errors, and the op-level invariants."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import conmatformer.tensor as T
from conmatformer.tensor import Tensor


class TestArithmeticAndShape:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(a, Tensor(np.eye(2, dtype=np.float32)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_matmul_hand_case(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError, match="inner dimensions"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_shape_length_invariant(self, rng):
        t = Tensor(rng.normal(size=(3, 4, 5)))
        assert np.prod(t.shape) == t.data.size

    def test_broadcast_mul_grad_shapes(self, rng):
        a = Tensor(rng.normal(size=(4, 1, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        T.backward(T.tsum(T.mul(a, b)))
        assert a.grad.shape == a.shape
        assert b.grad.shape == b.shape

    def test_concat_roundtrip(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
        out = T.concat([a, b], axis=0)
        assert out.shape == (3, 3)
        T.backward(T.tsum(T.mul(out, out)))
        np.testing.assert_allclose(a.grad.data, 2 * a.data, rtol=1e-6)


class TestLinear:
    def test_identity(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
        out = T.linear(x, Tensor(np.eye(3, dtype=np.float32)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_case(self):
        out = T.linear(Tensor([[1.0, 1.0]]), Tensor([[2.0], [3.0]]), Tensor([-5.0]))
        np.testing.assert_allclose(out.data, [[0.0]])

    def test_classifier_head_param_count(self):
        w = Tensor(np.zeros((768, 4)))
        b = Tensor(np.zeros(4))
        assert w.size + b.size == 3076

    def test_trailing_dim_mismatch(self):
        with pytest.raises(ValueError, match="trailing dim"):
            T.linear(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestLayerNorm:
    def test_constant_input_is_zero(self):
        x = Tensor(np.full((1, 5), 3.0))
        out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), axis=-1)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-3)

    def test_two_point_hand_case(self):
        out = T.layer_norm(Tensor([[1.0, 3.0]], dtype=np.float64),
                           Tensor(np.ones(2), dtype=np.float64),
                           Tensor(np.zeros(2), dtype=np.float64),
                           axis=-1, eps=1e-12)
        np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-5)

    def test_standardizes_random_input(self, rng):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 64)), dtype=np.float64)
        out = T.layer_norm(x, Tensor(np.ones(64), dtype=np.float64),
                           Tensor(np.zeros(64), dtype=np.float64), axis=-1, eps=1e-12)
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError, match="eps"):
            T.layer_norm(Tensor(np.ones((1, 2))), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), axis=-1, eps=0.0)

    @given(a=st.floats(0.1, 10.0), b=st.floats(-5.0, 5.0))
    @settings(max_examples=25, deadline=None)
    def test_affine_invariance(self, a, b):
        x = np.random.default_rng(7).normal(size=(2, 16))
        gamma = Tensor(np.ones(16), dtype=np.float64)
        beta = Tensor(np.zeros(16), dtype=np.float64)
        base = T.layer_norm(Tensor(x, dtype=np.float64), gamma, beta, axis=-1, eps=1e-12)
        scaled = T.layer_norm(Tensor(a * x + b, dtype=np.float64), gamma, beta,
                              axis=-1, eps=1e-12)
        np.testing.assert_allclose(scaled.data, base.data, atol=1e-5)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0]).reshape(1, 2), axis=-1)
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_hand_case(self):
        out = T.softmax(Tensor([[math.log(2.0), 0.0]], dtype=np.float64), axis=-1)
        np.testing.assert_allclose(out.data, [[2.0 / 3.0, 1.0 / 3.0]], rtol=1e-12)

    @given(shift=st.floats(-50.0, 50.0))
    @settings(max_examples=25, deadline=None)
    def test_shift_invariance(self, shift):
        x = np.random.default_rng(3).normal(size=(3, 5))
        a = T.softmax(Tensor(x, dtype=np.float64), axis=-1)
        b = T.softmax(Tensor(x + shift, dtype=np.float64), axis=-1)
        np.testing.assert_allclose(a.data, b.data, atol=1e-7)

    def test_sums_to_one_and_positive(self, rng):
        out = T.softmax(Tensor(rng.normal(size=(6, 9)) * 30), axis=-1)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        assert (out.data > 0).all()


class TestActivations:
    def test_zero_values(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0
        assert T.relu(Tensor([0.0])).data[0] == 0.0
        assert T.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_gelu_exact_gaussian_cdf(self):
        # 3 * Phi(3), Phi via the erf identity
        expected = 3.0 * 0.5 * (1.0 + math.erf(3.0 / math.sqrt(2.0)))
        out = T.gelu(Tensor([3.0], dtype=np.float64))
        np.testing.assert_allclose(out.data[0], expected, rtol=1e-12)
        assert abs(out.data[0] - 2.9960) < 1e-4

    def test_relu_clamps(self):
        out = T.relu(Tensor([-5.0, 5.0]))
        np.testing.assert_array_equal(out.data, [0.0, 5.0])


class TestConv2d:
    def test_identity_1x1_kernel(self, rng):
        x = Tensor(rng.normal(size=(1, 4, 4)))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_case_2x2_ones(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        out = T.conv2d(x, Tensor(np.ones((1, 1, 2, 2), dtype=np.float32)))
        np.testing.assert_allclose(out.data, [[[10.0]]])

    def test_output_geometry(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 11, 9)))
        out = T.conv2d(x, Tensor(rng.normal(size=(5, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 5, 6, 5)   # floor((11+2-3)/2)+1, floor((9+2-3)/2)+1

    def test_depthwise_group_independence(self, rng):
        w = Tensor(rng.normal(size=(2, 1, 3, 3)))
        x = rng.normal(size=(2, 5, 5)).astype(np.float32)
        full = T.conv2d(Tensor(x), w, padding=1, groups=2)
        zeroed = x.copy()
        zeroed[1] = 0.0
        partial = T.conv2d(Tensor(zeroed), w, padding=1, groups=2)
        np.testing.assert_array_equal(full.data[0], partial.data[0])
        np.testing.assert_array_equal(partial.data[1], 0.0)

    def test_divisibility_error(self, rng):
        with pytest.raises(ValueError, match="groups"):
            T.conv2d(Tensor(rng.normal(size=(3, 4, 4))),
                     Tensor(rng.normal(size=(3, 1, 1, 1))), groups=2)

    def test_kernel_too_large(self, rng):
        with pytest.raises(ValueError, match="larger than padded"):
            T.conv2d(Tensor(rng.normal(size=(1, 2, 2))),
                     Tensor(rng.normal(size=(1, 1, 5, 5))))


class TestPooling:
    def test_global_avg_constant(self):
        out = T.pool2d(Tensor(np.full((1, 3, 4, 4), 2.5)), "avg")
        np.testing.assert_allclose(out.data, [[2.5, 2.5, 2.5]], rtol=1e-6)

    def test_global_max(self):
        x = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert T.pool2d(x, "max").data.tolist() == [4.0]

    def test_channel_avg_hand_case(self):
        x = Tensor(np.array([[[2.0]], [[4.0]]]))
        out = T.pool2d(x, "avg", axis="channel")
        np.testing.assert_allclose(out.data, [[[3.0]]])

    def test_window_pool(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        out = T.pool2d(x, "max", window=2)
        assert out.shape == (1, 2, 2, 2)
        assert out.data[0, 0, 0, 0] == x.data[0, 0, :2, :2].max()

    def test_window_oversize(self, rng):
        with pytest.raises(ValueError, match="window"):
            T.pool2d(Tensor(rng.normal(size=(1, 2, 4, 4))), "avg", window=5)

    def test_avg_subtract_zero_mean(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), dtype=np.float64)
        pooled = T.pool2d(x, "avg")
        centered = T.sub(x, T.reshape(pooled, (2, 3, 1, 1)))
        np.testing.assert_allclose(centered.data.mean(axis=(-2, -1)), 0.0, atol=1e-6)


class TestDropout:
    def test_p_zero_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        out = T.dropout(x, 0.0, training=True, rng=rng)
        assert out is x

    def test_inference_is_identity(self, rng):
        x = Tensor(rng.normal(size=(4, 4)))
        assert T.dropout(x, 0.7, training=False) is x

    def test_mean_preserved(self):
        x = Tensor(np.ones(100_000))
        out = T.dropout(x, 0.5, training=True, rng=np.random.default_rng(0))
        assert abs(out.data.mean() - 1.0) < 0.02

    def test_invalid_p(self, rng):
        with pytest.raises(ValueError, match="probability"):
            T.dropout(Tensor(np.ones(3)), 1.0, training=True, rng=rng)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 3]))
        np.testing.assert_allclose(loss.data, math.log(4.0), rtol=1e-6)

    def test_saturated_margin(self):
        logits = np.zeros((1, 4), dtype=np.float64)
        logits[0, 2] = 20.0
        loss = T.cross_entropy(Tensor(logits, dtype=np.float64), np.array([2]))
        assert loss.data < 1e-8

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            T.cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


class TestBackwardSemantics:
    def test_sum_grad_is_ones(self, rng):
        x = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        T.backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad.data, np.ones((3, 3)))
        assert x.grad.shape == x.shape

    def test_square_hand_derivative(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        T.backward(T.tsum(T.mul(x, x)))
        np.testing.assert_allclose(x.grad.data, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            T.backward(T.mul(x, x))

    def test_repeated_backward_rejected(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        loss = T.tsum(T.mul(x, x))
        T.backward(loss)
        with pytest.raises(RuntimeError, match="consumed"):
            T.backward(loss)

    def test_backward_without_tape_rejected(self):
        with pytest.raises(RuntimeError, match="tape"):
            T.backward(T.tsum(Tensor(np.ones(2))))

    def test_no_grad_blocks_recording(self, rng):
        x = Tensor(rng.normal(size=(3,)), requires_grad=True)
        with T.no_grad():
            out = T.tsum(T.mul(x, x))
        assert not out.requires_grad

    def test_determinism_same_inputs(self, rng):
        x = rng.normal(size=(4, 6, 6)).astype(np.float32)
        w = rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(w), padding=1)
        b = T.conv2d(Tensor(x), Tensor(w), padding=1)
        assert np.array_equal(a.data, b.data)
