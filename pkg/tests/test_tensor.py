"""Tensor autodiff: analytic gradients vs central differences, op contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bathyfill import tensor as T
from bathyfill.tensor import (
    GradientError,
    ShapeError,
    Tensor,
    finite_difference_check,
)


def rand(shape, seed=0, scale=1.0, dtype=np.float64):
    return np.random.default_rng(seed).normal(0, scale, size=shape).astype(dtype)


def tensor(shape, seed=0, scale=1.0, dtype=np.float64):
    return Tensor(rand(shape, seed, scale, dtype), requires_grad=True)


class TestBasics:
    def test_matmul_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_allclose(T.matmul(a, b).data, b.data)

    def test_matmul_hand_product(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_allclose(out.data, [[11.0]])

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            T.matmul(tensor((2, 3)), tensor((2, 2)))

    def test_relu_definition(self):
        np.testing.assert_allclose(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_softmax_symmetry(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_softmax_axis_out_of_range(self):
        with pytest.raises(ShapeError):
            T.softmax(tensor((2, 3)), axis=5)

    def test_sum_grad_all_ones(self):
        x = tensor((3, 4))
        x.sum().backward()
        np.testing.assert_allclose(x.grad, np.ones((3, 4)))

    def test_square_grad_2x(self):
        x = tensor((5,), seed=1)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_backward_requires_scalar(self):
        with pytest.raises(GradientError):
            tensor((2, 2)).sum(axis=0).backward()

    def test_double_backward_is_error(self):
        x = tensor((3,))
        loss = (x * x).sum()
        loss.backward()
        with pytest.raises(GradientError, match="already ran"):
            loss.backward()

    def test_dropout_inference_is_identity(self):
        x = tensor((4, 4))
        assert T.dropout(x, 0.5, training=False) is x

    def test_dropout_training_scales(self):
        rng = np.random.default_rng(0)
        x = Tensor(np.ones((200, 200)))
        out = T.dropout(x, 0.25, training=True, rng=rng)
        kept = out.data[out.data != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)
        assert abs((out.data != 0).mean() - 0.75) < 0.02

    def test_dropout_training_needs_rng(self):
        with pytest.raises(ValueError):
            T.dropout(tensor((2, 2)), 0.5, training=True)


class TestLayerNorm:
    def test_normalizes_last_axis(self):
        x = tensor((6, 32), seed=3, scale=4.0)
        out = T.layernorm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)), eps=1e-10)
        assert np.abs(out.data.mean(axis=-1)).max() < 1e-6
        assert np.abs(out.data.var(axis=-1) - 1.0).max() < 1e-4


class TestConv:
    def test_identity_kernel(self):
        x = tensor((1, 3, 3), seed=2)
        k = Tensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(T.conv2d(x, k).data, x.data)

    def test_ones_kernel_center(self):
        x = Tensor(np.ones((1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, k, padding=1)
        assert out.data[0, 1, 1] == 9.0

    def test_empty_output_raises(self):
        with pytest.raises(ShapeError):
            T.conv2d(tensor((1, 2, 2)), Tensor(np.ones((1, 1, 5, 5))))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(tensor((2, 4, 4)), Tensor(np.ones((1, 3, 3, 3))))

    @pytest.mark.parametrize("c_in,h,w,c_out,kh,stride,padding", [
        (2, 5, 5, 3, 3, 1, 0),
        (2, 5, 5, 3, 3, 1, 1),
        (1, 8, 8, 2, 3, 2, 1),
        (3, 6, 7, 2, 1, 1, 0),
        (4, 8, 8, 2, 3, 1, 1),
    ])
    def test_matches_naive_loops(self, c_in, h, w, c_out, kh, stride, padding):
        x = rand((c_in, h, w), seed=h * w + c_in)
        k = rand((c_out, c_in, kh, kh), seed=kh + c_out)
        b = rand((c_out,), seed=9)
        got = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, padding=padding).data
        want = naive_conv2d(x, k, b, stride, padding)
        np.testing.assert_allclose(got, want, atol=1e-6)


def naive_conv2d(x, k, b, stride, padding):
    """Direct 6-loop cross-correlation reference."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(c_in):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += xp[c, i * stride + a, j * stride + bb] * k[o, c, a, bb]
                out[o, i, j] = acc + b[o]
    return out


class TestResizeConcat:
    def test_resize_same_size_is_identity(self):
        x = tensor((2, 3, 5, 7), seed=4)
        out = T.bilinear_resize(x, 5, 7)
        np.testing.assert_allclose(out.data, x.data, atol=1e-6)

    def test_concat_then_split_recovers(self):
        parts = [tensor((2, c, 3), seed=c) for c in (1, 2, 4)]
        joined = T.concat(parts, axis=1)
        back = T.split(joined, [1, 2, 4], axis=1)
        for orig, piece in zip(parts, back):
            np.testing.assert_array_equal(piece.data, orig.data)

    def test_split_bad_sizes(self):
        with pytest.raises(ShapeError):
            T.split(tensor((2, 5)), [2, 2], axis=1)

    @given(st.integers(2, 6), st.integers(2, 6))
    @settings(max_examples=20, deadline=None)
    def test_resize_identity_property(self, h, w):
        x = Tensor(rand((1, h, w), seed=h * 31 + w))
        np.testing.assert_allclose(T.bilinear_resize(x, h, w).data, x.data, atol=1e-6)


class TestGradients64:
    """Central-difference checks in float64: rel-err < 1e-5."""

    TOL = 1e-5

    def check(self, f, params, eps=1e-5):
        assert finite_difference_check(f, params, eps=eps) < self.TOL

    def test_matmul_random(self):
        a, b = tensor((3, 4), 0), tensor((4, 2), 1)
        self.check(lambda: (T.matmul(a, b) ** 2).sum(), [a, b])

    def test_batched_matmul(self):
        a, b = tensor((2, 3, 4), 0), tensor((2, 4, 2), 1)
        self.check(lambda: (T.matmul(a, b) ** 2).sum(), [a, b])

    def test_broadcast_add_mul(self):
        a, b = tensor((3, 4), 0), tensor((4,), 1)
        self.check(lambda: ((a + b) * b).sum(), [a, b])

    def test_div_sqrt_exp(self):
        a = Tensor(np.abs(rand((5,), 0)) + 1.0, requires_grad=True)
        b = Tensor(np.abs(rand((5,), 1)) + 1.0, requires_grad=True)
        self.check(lambda: ((a / b).sqrt() + a.exp() * 0.01).sum(), [a, b])

    def test_mean_axes(self):
        a = tensor((3, 4, 5), 2)
        self.check(lambda: (a.mean(axis=1) ** 2).sum(), [a])

    def test_softmax(self):
        a = tensor((3, 6), 3)
        w = Tensor(rand((6,), 4))
        self.check(lambda: (T.softmax(a, -1) * w).sum(), [a])

    def test_layernorm(self):
        x, g, b = tensor((4, 8), 0, 0.5), tensor((8,), 1, 0.2), tensor((8,), 2, 0.2)
        self.check(lambda: (T.layernorm(x, g, b) ** 2).sum(), [x, g, b])

    def test_conv2d(self):
        x, k, b = tensor((2, 3, 6, 6), 0, 0.5), tensor((4, 3, 3, 3), 1, 0.3), tensor((4,), 2, 0.1)
        self.check(lambda: (T.conv2d(x, k, b, padding=1) ** 2).sum(), [x, k, b])

    def test_conv2d_strided(self):
        x, k = tensor((1, 2, 8, 8), 3, 0.5), tensor((2, 2, 3, 3), 4, 0.3)
        self.check(lambda: (T.conv2d(x, k, stride=2, padding=1) ** 2).sum(), [x, k])

    def test_maxpool(self):
        x = tensor((2, 2, 6, 6), 5)
        self.check(lambda: (T.maxpool2d(x) ** 2).sum(), [x])

    def test_avgpool(self):
        x = tensor((2, 2, 6, 6), 6)
        self.check(lambda: (T.avgpool2d(x, 2) ** 2).sum(), [x])

    def test_bilinear_resize_up_down(self):
        x = tensor((1, 2, 4, 4), 7)
        self.check(lambda: (T.bilinear_resize(x, 7, 9) ** 2).sum(), [x])
        self.check(lambda: (T.bilinear_resize(x, 3, 2) ** 2).sum(), [x])

    def test_concat_transpose_reshape(self):
        a, b = tensor((2, 3), 8), tensor((2, 2), 9)
        self.check(
            lambda: (T.concat([a, b], axis=1).transpose(1, 0).reshape(10) ** 2).sum(), [a, b]
        )

    def test_take(self):
        a = tensor((5, 3), 10)
        idx = np.array([0, 2, 2, 4])
        self.check(lambda: (T.take(a, idx, axis=0) ** 2).sum(), [a])

    def test_linear(self):
        x, w, b = tensor((4, 6), 11), tensor((6, 3), 12), tensor((3,), 13)
        self.check(lambda: (T.linear(x, w, b) ** 2).sum(), [x, w, b])

    def test_composite_chain(self):
        # conv -> relu -> matmul -> softmax, the full layer-type mix
        x = tensor((1, 2, 4, 4), 14, 0.5)
        k = tensor((3, 2, 3, 3), 15, 0.4)
        w = tensor((16, 4), 16, 0.4)

        def f():
            h = T.relu(T.conv2d(x, k, padding=1))
            flat = h.reshape(3, 16)
            return (T.softmax(T.matmul(flat, w), -1) * T.matmul(flat, w)).sum()

        self.check(f, [x, k, w])


class TestGradients32:
    """float32 analytic gradients vs float64 central differences: rel-err < 1e-3.

    float32 values are exact in float64, so the 64-bit finite differences
    probe the same function the 32-bit backward pass differentiated.
    """

    TOL = 1e-3

    def test_conv_relu_pool_chain(self):
        from conftest import cross_precision_fd

        err = cross_precision_fd(
            lambda p: (T.maxpool2d(T.relu(T.conv2d(p[0], p[1], padding=1))) ** 2).mean(),
            [rand((1, 2, 6, 6), 21, 0.5), rand((2, 2, 3, 3), 22, 0.3)],
        )
        assert err < self.TOL

    def test_attention_stack(self):
        from conftest import cross_precision_fd

        from bathyfill.network import multihead_attention

        lim = float(np.sqrt(6 / 16))
        rng = np.random.default_rng(24)
        mats = [rng.uniform(-lim, lim, size=(8, 8)) for _ in range(4)]
        err = cross_precision_fd(
            lambda p: (multihead_attention(p[0], p[0], p[1], p[2], p[3], 2, wo=p[4]) ** 2).mean(),
            [rand((2, 16, 8), 23, 0.5)] + mats,
        )
        assert err < self.TOL

    def test_layernorm_softmax(self):
        from conftest import cross_precision_fd

        err = cross_precision_fd(
            lambda p: (T.softmax(T.layernorm(p[0], p[1], p[2]), -1) ** 2).mean(),
            [rand((3, 8), 25, 0.5), 1 + 0.1 * rand((8,), 26), rand((8,), 27, 0.1)],
        )
        assert err < self.TOL


class TestFiniteDifferenceCheck:
    def test_quadratic_is_exact(self):
        p = Tensor(np.array([1.7, -0.4, 2.2]), requires_grad=True)
        err = finite_difference_check(lambda: (p * p).sum(), [p], eps=1e-4)
        assert err < 1e-9

    def test_linear_layer(self):
        x = Tensor(rand((3, 4), 1))
        w = tensor((4, 2), 2)
        b = tensor((2,), 3)
        err = finite_difference_check(lambda: T.linear(x, w, b).sum(), [w, b], eps=1e-4)
        assert err < 1e-6

    def test_nan_is_diagnosed(self):
        p = Tensor(np.array([0.0]), requires_grad=True)

        def f():
            return (p.sqrt() * p).sum()  # derivative blows up at 0, f(-eps) is nan

        with np.errstate(invalid="ignore", divide="ignore"):
            with pytest.raises(GradientError):
                finite_difference_check(f, [p], eps=1e-4)

    def test_non_scalar_rejected(self):
        p = tensor((2,))
        with pytest.raises(GradientError):
            finite_difference_check(lambda: p * p, [p])


class TestDeterminism:
    def test_same_seed_same_dropout(self):
        x = Tensor(np.ones((8, 8)))
        a = T.dropout(x, 0.3, training=True, rng=np.random.default_rng(11)).data
        b = T.dropout(x, 0.3, training=True, rng=np.random.default_rng(11)).data
        np.testing.assert_array_equal(a, b)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=10, deadline=None)
    def test_softmax_rows_sum_to_one(self, seed):
        x = Tensor(rand((4, 7), seed=seed, scale=3.0))
        out = T.softmax(x, axis=-1).data
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)
