import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmat import tensor as T
from dmat.tensor import ContractError, DimensionError, ParameterError, Tensor

from oracles import bilinear_scalar, conv2d_loops, matmul_loops

floats = st.floats(-1, 1, allow_nan=False, width=64)


class TestTensorInvariants:
    def test_size_matches_shape(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.size == 24 and t.shape == (2, 3, 4)

    def test_default_precision_is_float32(self):
        assert T.tensor([1, 2, 3]).dtype == np.float32

    def test_no_grad_tensor_never_accumulates(self):
        a = Tensor(np.ones(3), requires_grad=True)
        c = Tensor(np.ones(3))
        T.backward(T.sum_(a * c))
        assert c.grad is None and a.grad is not None

    def test_grad_shape_matches_data(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        T.backward(T.sum_(a * 3.0 + 1.0))
        assert a.grad.shape == a.shape

    def test_broadcast_grad_is_reduced(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        T.backward(T.sum_(a * b))
        np.testing.assert_array_equal(b.grad, [2, 2, 2])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_sum(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        T.backward(T.sum_(x * x))
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_is_contract_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_tape_visits_each_op_once(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = T.exp(x)
        z = y * y + y
        tape = T.backward(T.sum_(z))
        names = tape.op_names()
        assert len(names) == len(set(id(t) for t, _ in tape.nodes))
        assert names.count("exp") == 1

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([0.5]), requires_grad=True)
        y = T.exp(x)
        T.backward(T.sum_(y * y + y))
        e = math.exp(0.5)
        np.testing.assert_allclose(x.grad, [2 * e * e + e])

    def test_graph_released_after_backward(self):
        x = Tensor(np.ones(2), requires_grad=True)
        loss = T.sum_(x * 2.0)
        T.backward(loss)
        with pytest.raises(ContractError):
            T.backward(loss)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestConv2d:
    def test_all_ones_is_nine(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0

    @pytest.mark.parametrize("k", [1, 3, 5, 7])
    def test_identity_kernel(self, k):
        x = np.random.default_rng(k).normal(size=(2, 3, 9, 9))
        w = np.zeros((3, 3, k, k))
        for c in range(3):
            w[c, c, k // 2, k // 2] = 1
        out = T.conv2d(Tensor(x), Tensor(w), None, padding=k // 2)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loop_oracle(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, w, b = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        np.testing.assert_allclose(out.data, conv2d_loops(x, w, b, stride, pad), atol=1e-12)

    def test_channel_mismatch_names_axes(self):
        with pytest.raises(DimensionError, match="channel"):
            T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((3, 4, 3, 3))))

    def test_empty_output_rejected(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


class TestMatmul:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(4, 5))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(4)), Tensor(x)).data, x)

    def test_integer_product_vs_loops(self):
        a = np.array([[1.0, 2, 3], [4, 5, 6]])
        b = np.array([[7.0, 8], [9, 10], [11, 12]])
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b))
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, [[58, 64], [139, 154]])

    def test_zero(self):
        x = np.random.default_rng(1).normal(size=(3, 2))
        assert not T.matmul(Tensor(np.zeros((4, 3))), Tensor(x)).data.any()

    def test_batched_broadcast(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 5, 2))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)

    def test_inner_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3)), -1).data, [1 / 3] * 3)

    def test_modal_vs_occluded_gap(self):
        out = T.softmax(Tensor(np.array([30.0, -100.0])), -1).data
        assert out[0] == pytest.approx(1.0)
        assert out[1] == pytest.approx(math.exp(-130), rel=1e-9)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one_and_shift_invariant(self, x, c):
        a = T.softmax(Tensor(x), -1).data
        b = T.softmax(Tensor(x + c), -1).data
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
        assert (a >= 0).all()
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_large_logits_finite(self):
        out = T.softmax(Tensor(np.array([1e4, 0.0, -1e4])), -1).data
        assert np.isfinite(out).all()


class TestBilinear:
    @pytest.mark.parametrize("factor", [2, 3, 4])
    def test_constant_preserved_exactly(self, factor):
        x = np.full((1, 2, 3, 5), 0.3712, dtype=np.float32)
        out = T.bilinear_upsample(Tensor(x), factor).data
        assert out.shape == (1, 2, 3 * factor, 5 * factor)
        assert (out == np.float32(0.3712)).all()

    def test_factor_one_identity(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 4, 4))
        np.testing.assert_array_equal(T.bilinear_upsample(Tensor(x), 1).data, x)

    def test_two_by_two_vs_scalar_oracle(self):
        x = np.array([[0.0, 1.0], [2.0, 3.0]])
        out = T.bilinear_upsample(Tensor(x[None, None]), 2).data[0, 0]
        np.testing.assert_allclose(out, bilinear_scalar(x, 2), atol=1e-12)
        np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])

    @given(arrays(np.float64, (3, 4), elements=floats), st.integers(2, 4))
    @settings(max_examples=25, deadline=None)
    def test_random_vs_scalar_oracle(self, x, factor):
        out = T.bilinear_upsample(Tensor(x[None, None]), factor).data[0, 0]
        np.testing.assert_allclose(out, bilinear_scalar(x, factor), atol=1e-12)

    @pytest.mark.parametrize("factor", [0, -1, 1.5])
    def test_bad_factor(self, factor):
        with pytest.raises(ParameterError):
            T.bilinear_upsample(Tensor(np.ones((1, 1, 2, 2))), factor)


class TestFiniteDiff:
    def test_sum_error_near_zero(self):
        x = np.random.default_rng(0).uniform(-1, 1, (3, 4))
        assert T.finite_diff_check(lambda t: T.sum_(t), x) < 1e-8

    def test_softmax_square_sum(self):
        x = np.random.default_rng(1).uniform(-1, 1, (4, 6))
        f = lambda t: T.sum_(T.softmax(t, -1) * T.softmax(t, -1))  # noqa: E731
        assert T.finite_diff_check(f, x) < 1e-2

    def test_detects_wrong_gradient(self):
        def bad_square(t):
            return T._make(t.data**2, (t,), lambda g: (g * t.data,), "bad")  # half the true derivative

        x = np.random.default_rng(2).uniform(0.5, 1, 5)
        assert T.finite_diff_check(lambda t: T.sum_(bad_square(t)), x) > 0.4

    def test_nonpositive_eps_rejected(self):
        with pytest.raises(ParameterError):
            T.finite_diff_check(lambda t: T.sum_(t), np.ones(2), eps=0)


@pytest.mark.parametrize(
    "fn",
    [T.exp, T.tanh, T.sigmoid, T.silu, T.softplus, lambda t: T.log(t * t + 1.0), lambda t: T.power(T.exp(t), 2.5)],
)
def test_elementwise_gradients(fn):
    x = np.random.default_rng(3).uniform(-1, 1, (3, 4))
    w = np.random.default_rng(4).uniform(0.5, 1.5, (3, 4))
    assert T.finite_diff_check(lambda t: T.sum_(fn(t) * w), x) < 1e-2


def test_slicing_concat_roll_gradients():
    x = np.random.default_rng(5).uniform(-1, 1, (4, 5))
    w = np.random.default_rng(6).uniform(0.5, 1.5, (4, 7))
    f = lambda t: T.sum_(T.concat([T.roll(t, 1, 0), t[:, :2] * 2.0], axis=1) * w)  # noqa: E731
    assert T.finite_diff_check(f, x) < 1e-2


def test_float32_default_forward():
    x = T.tensor(np.ones((1, 1, 4, 4)))
    w = T.tensor(np.ones((1, 1, 3, 3)))
    assert T.conv2d(x, w, None, padding=1).dtype == np.float32
