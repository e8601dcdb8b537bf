"""Core tensor engine: op semantics, gradients vs finite differences, properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsrkit import tensor as T
from avsrkit.errors import ContractError, NumericError, ShapeError
from avsrkit.harness import central_difference, relative_error
from avsrkit.tensor import Tensor


def rand(shape, seed, scale=1.0):
    return np.random.default_rng(seed).standard_normal(shape) * scale


def check_grad(build, tensors, seed=0, tol=1e-6, h=1e-5):
    """Analytic gradient of build() vs central differences on every element."""
    loss = build()
    T.backward(loss)
    for t in tensors:
        analytic = t.grad.reshape(-1)
        fd = central_difference(lambda: build().item(), t.data, list(range(t.data.size)), h)
        assert relative_error(analytic, fd) <= tol
        t.grad = None


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(T.matmul(eye, m).data, m.data)

    def test_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_matches_triple_loop_oracle(self):
        a = Tensor(rand((3, 4), 0))
        b = Tensor(rand((4, 2), 1))
        expect = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    expect[i, j] += a.data[i, k] * b.data[k, j]
        assert np.abs(T.matmul(a, b).data - expect).max() <= 1e-12

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
            T.matmul(Tensor(rand((3, 4), 0)), Tensor(rand((3, 2), 1)))

    def test_batched_broadcast(self):
        a = Tensor(rand((5, 3, 4), 0))
        b = Tensor(rand((4, 2), 1))
        out = T.matmul(a, b)
        assert out.shape == (5, 3, 2)
        assert np.allclose(out.data, a.data @ b.data)

    def test_gradients(self):
        a = Tensor(rand((3, 4), 2), requires_grad=True)
        b = Tensor(rand((4, 2), 3), requires_grad=True)
        w = Tensor(rand((3, 2), 4))
        check_grad(lambda: T.sum_(T.mul(T.matmul(a, b), w)), [a, b])


class TestLogSoftmax:
    def test_uniform(self):
        out = T.log_softmax(Tensor([[0.0, 0.0, 0.0]]), axis=1)
        assert np.allclose(out.data, np.log(1 / 3))

    def test_stability_limit(self):
        out = T.log_softmax(Tensor([[1000.0, 0.0]]), axis=1)
        assert np.allclose(out.data, [[0.0, -1000.0]])

    def test_exp_sums_to_one(self):
        x = Tensor(rand((5,), 0).reshape(1, 5))
        out = T.log_softmax(x, axis=1)
        assert abs(np.exp(out.data).sum() - 1.0) <= 1e-12

    def test_nan_input_is_numeric_error(self):
        with pytest.raises(NumericError):
            T.log_softmax(Tensor([[np.nan, 0.0]]), axis=1)

    def test_gradients(self):
        x = Tensor(rand((2, 5), 1), requires_grad=True)
        w = Tensor(rand((2, 5), 2))
        check_grad(lambda: T.sum_(T.mul(T.log_softmax(x, axis=1), w)), [x])


class TestLayerNorm:
    def test_constant_vector_zeroed(self):
        gain = Tensor(np.ones(4))
        bias = Tensor(np.zeros(4))
        out = T.layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), gain, bias, eps=1e-5)
        assert np.abs(out.data).max() < 1e-6

    def test_already_normalized_fixed_point(self):
        gain, bias = Tensor(np.ones(2)), Tensor(np.zeros(2))
        out = T.layer_norm(Tensor([[1.0, -1.0]]), gain, bias, eps=1e-12)
        assert np.allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_statistics(self):
        # eps=1e-5 shrinks the output variance by eps/var; a variance well
        # above eps keeps the deviation within the 1e-6 bound.
        x = Tensor(rand((3, 16), 0, scale=5.0))
        out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)), eps=1e-5).data
        assert np.abs(out.mean(axis=1)).max() <= 1e-7
        assert np.abs(out.var(axis=1) - 1.0).max() <= 1e-6

    def test_gradients(self):
        x = Tensor(rand((2, 6), 1), requires_grad=True)
        gain = Tensor(rand((6,), 2), requires_grad=True)
        bias = Tensor(rand((6,), 3), requires_grad=True)
        w = Tensor(rand((2, 6), 4))
        check_grad(lambda: T.sum_(T.mul(T.layer_norm(x, gain, bias), w)), [x, gain, bias])


class TestConv1d:
    def test_identity_kernel_subsampling(self):
        x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
        w = Tensor(np.ones((1, 1, 1)))
        out = T.conv1d(x, w, stride=2, padding=(0, 0))
        assert out.data.reshape(-1).tolist() == [1.0, 3.0]

    def test_length_formula_and_sliding_window_oracle(self):
        x = Tensor(rand((16000, 1), 0))
        w = Tensor(rand((80, 1, 2), 1))
        out = T.conv1d(x, w, stride=4, padding=(38, 38))
        assert out.shape[0] == (16000 + 76 - 80) // 4 + 1 == 4000
        xp = np.pad(x.data, ((38, 38), (0, 0)))
        for t in (0, 1, 1999, 3999):
            expect = np.einsum("kc,kco->o", xp[4 * t : 4 * t + 80], w.data)
            assert np.abs(out.data[t] - expect).max() <= 1e-12

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError, match="kernel"):
            T.conv1d(Tensor(rand((3, 1), 0)), Tensor(rand((8, 1, 1), 1)), 1, (0, 0))

    def test_gradients(self):
        x = Tensor(rand((9, 2), 2), requires_grad=True)
        w = Tensor(rand((3, 2, 3), 3), requires_grad=True)
        proj = Tensor(rand((4, 3), 4))
        check_grad(lambda: T.sum_(T.mul(T.conv1d(x, w, 2, (0, 1)), proj)), [x, w])


class TestConv2d3d:
    def test_averaging_kernel_on_constant_image(self):
        img = Tensor(np.full((1, 8, 8, 1), 5.0))
        w = Tensor(np.full((3, 3, 1, 1), 1.0 / 9.0))
        out = T.conv2d(img, w, (1, 1), (0, 0))
        assert np.allclose(out.data, 5.0)

    def test_conv2d_gradients(self):
        x = Tensor(rand((2, 5, 5, 2), 0), requires_grad=True)
        w = Tensor(rand((3, 3, 2, 2), 1), requires_grad=True)
        proj = Tensor(rand((2, 3, 3, 2), 2))
        check_grad(lambda: T.sum_(T.mul(T.conv2d(x, w, (2, 2), (1, 1)), proj)), [x, w])

    def test_conv3d_shape_and_gradients(self):
        x = Tensor(rand((4, 6, 6, 1), 3), requires_grad=True)
        w = Tensor(rand((3, 3, 3, 1, 2), 4), requires_grad=True)
        out = T.conv3d(x, w, (1, 2, 2), (1, 1, 1))
        assert out.shape == (4, 3, 3, 2)
        proj = Tensor(rand(out.shape, 5))
        check_grad(lambda: T.sum_(T.mul(T.conv3d(x, w, (1, 2, 2), (1, 1, 1)), proj)), [x, w])

    def test_maxpool_gradients(self):
        x = Tensor(rand((2, 6, 6, 2), 6), requires_grad=True)
        proj = Tensor(rand((2, 3, 3, 2), 7))
        check_grad(lambda: T.sum_(T.mul(T.maxpool2d(x, (3, 3), (2, 2), (1, 1)), proj)), [x])


class TestDepthwise:
    def test_delta_kernel_is_identity(self):
        x = Tensor(rand((10, 3), 0))
        w = np.zeros((5, 3))
        w[2, :] = 1.0
        out = T.depthwise_conv1d(x, Tensor(w))
        assert np.abs(out.data - x.data).max() <= 1e-12

    def test_kernel_31_preserves_length(self):
        out = T.depthwise_conv1d(Tensor(rand((40, 4), 1)), Tensor(rand((31, 4), 2)))
        assert out.shape == (40, 4)

    def test_matches_per_channel_oracle(self):
        x = Tensor(rand((12, 3), 3))
        w = Tensor(rand((5, 3), 4))
        out = T.depthwise_conv1d(x, w)
        xp = np.pad(x.data, ((2, 2), (0, 0)))
        for t in range(12):
            for c in range(3):
                expect = sum(xp[t + k, c] * w.data[k, c] for k in range(5))
                assert abs(out.data[t, c] - expect) <= 1e-12

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            T.depthwise_conv1d(Tensor(rand((8, 2), 5)), Tensor(rand((4, 2), 6)))

    def test_gradients(self):
        x = Tensor(rand((7, 2), 7), requires_grad=True)
        w = Tensor(rand((3, 2), 8), requires_grad=True)
        proj = Tensor(rand((7, 2), 9))
        check_grad(lambda: T.sum_(T.mul(T.depthwise_conv1d(x, w), proj)), [x, w])


class TestGluSwishRelu:
    def test_zero_gates_halve(self):
        x = np.concatenate([rand((4,), 0), np.zeros(4)]).reshape(1, 8)
        out = T.glu(Tensor(x))
        assert np.allclose(out.data, 0.5 * x[:, :4])

    def test_saturated_gates_pass_through(self):
        x = np.concatenate([rand((4,), 1), np.full(4, 50.0)]).reshape(1, 8)
        out = T.glu(Tensor(x))
        assert np.allclose(out.data, x[:, :4])

    def test_glu_elementwise_oracle(self):
        x = rand((3, 6), 2)
        out = T.glu(Tensor(x))
        expect = x[:, :3] * (1.0 / (1.0 + np.exp(-x[:, 3:])))
        assert np.abs(out.data - expect).max() <= 1e-12

    def test_glu_odd_extent_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            T.glu(Tensor(rand((2, 5), 3)))

    def test_point_values(self):
        assert T.swish(Tensor([0.0])).item() == 0.0
        assert T.relu(Tensor([-3.0])).item() == 0.0

    def test_swish_asymptote(self):
        assert abs(T.swish(Tensor([30.0])).item() - 30.0) < 1e-8

    def test_activation_gradients_match_fd(self):
        # keep inputs away from the ReLU kink where FD is not a valid oracle
        x = Tensor(rand((6,), 4) + np.sign(rand((6,), 4)) * 0.1, requires_grad=True)
        w = Tensor(rand((6,), 5))
        check_grad(lambda: T.sum_(T.mul(T.swish(x), w)), [x], tol=1e-8)
        check_grad(lambda: T.sum_(T.mul(T.relu(x), w)), [x], tol=1e-8)
        check_grad(lambda: T.sum_(T.mul(T.sigmoid(x), w)), [x], tol=1e-8)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        w = Tensor(rand((4,), 0), requires_grad=True)
        T.backward(T.sum_(w))
        assert np.array_equal(w.grad, np.ones(4))

    def test_square_gradient(self):
        w = Tensor(rand((4,), 1), requires_grad=True)
        T.backward(T.sum_(T.mul(w, w)))
        assert np.allclose(w.grad, 2 * w.data)

    def test_composite_matches_finite_differences(self):
        a = Tensor(rand((3, 4), 2), requires_grad=True)
        b = Tensor(rand((4, 5), 3), requires_grad=True)
        target = np.array([1, 3, 0])

        def build():
            logits = T.matmul(a, b)
            lp = T.log_softmax(logits, axis=1)
            picked = T.take_along_last(lp, target.reshape(3, 1))
            return T.neg(T.sum_(picked))

        check_grad(build, [a, b], tol=1e-6)

    def test_non_scalar_loss_rejected(self):
        w = Tensor(rand((3,), 4), requires_grad=True)
        with pytest.raises(ContractError, match="scalar"):
            T.backward(T.mul(w, w))

    def test_accumulation_is_additive(self):
        w = Tensor(rand((3,), 5), requires_grad=True)
        y = T.add(w, w)
        T.backward(T.sum_(y))
        assert np.allclose(w.grad, 2.0)
        T.backward(T.sum_(T.mul(w, Tensor(np.ones(3)))))
        assert np.allclose(w.grad, 3.0)


class TestDeterminism:
    def test_bit_identical_forward_and_backward(self):
        def run():
            rng = np.random.default_rng(99)
            x = Tensor(rng.standard_normal((6, 5)), requires_grad=True)
            w = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
            out = T.log_softmax(T.matmul(T.relu(x), w), axis=1)
            T.backward(T.sum_(T.mul(out, out)))
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        first = run()
        second = run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


@settings(max_examples=200, deadline=None)
@given(
    length=st.integers(1, 200),
    kernel=st.integers(1, 12),
    stride=st.integers(1, 5),
    pad=st.integers(0, 12),
)
def test_conv_output_length_formula(length, kernel, stride, pad):
    padded = length + 2 * pad
    if kernel > padded:
        return
    x = Tensor(np.zeros((length, 1)))
    w = Tensor(np.zeros((kernel, 1, 1)))
    out = T.conv1d(x, w, stride, (pad, pad))
    assert out.shape[0] == (padded - kernel) // stride + 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_log_softmax_rows_normalize(seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((3, 7)) * 10)
    rows = np.exp(T.log_softmax(x, axis=1).data).sum(axis=1)
    assert np.abs(rows - 1.0).max() <= 1e-12
