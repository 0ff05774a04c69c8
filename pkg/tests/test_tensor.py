import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowattack import tensor as T
from flowattack.tensor import ShapeError, Tape, Tensor, backward

from conftest import fd_check


def brute_conv(x, w, b, stride, pad, dil):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - dil * (k - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (k - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + dil * (k - 1) + 1:dil,
                       j * stride:j * stride + dil * (k - 1) + 1:dil]
            out[:, :, i, j] = np.einsum("nckl,ockl->no", patch, w)
    return out + b[None, :, None, None]


def brute_correlation(f1, f2, md):
    n, c, h, w = f1.shape
    d = 2 * md + 1
    out = np.zeros((n, d * d, h, w))
    for dy in range(-md, md + 1):
        for dx in range(-md, md + 1):
            ch = (dy + md) * d + (dx + md)
            for y in range(h):
                for x in range(w):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[:, ch, y, x] = (f1[:, :, y, x] * f2[:, :, yy, xx]).sum(1) / c
    return out


class TestForwardOracles:
    @pytest.mark.parametrize("stride,pad,dil,k", [(1, 1, 1, 3), (2, 3, 1, 7), (1, 2, 2, 3), (2, 2, 1, 5)])
    def test_conv2d_matches_loops(self, rng, stride, pad, dil, k):
        x = rng.standard_normal((2, 3, 9, 11))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad, dil).data
        np.testing.assert_allclose(out, brute_conv(x, w, b, stride, pad, dil), atol=1e-12)

    def test_transposed_conv_is_adjoint_of_conv(self, rng):
        # <conv(x), y> == <x, conv^T(y)> for matching stride/padding
        x = rng.standard_normal((1, 3, 8, 10))
        w = rng.standard_normal((5, 3, 4, 4))
        y_shape = T.conv2d(Tensor(x), Tensor(w), None, 2, 1).shape
        y = rng.standard_normal(y_shape)
        lhs = (T.conv2d(Tensor(x), Tensor(w), None, 2, 1).data * y).sum()
        xt = T.transposed_conv2d(Tensor(y), Tensor(w), None, 2, 1).data
        assert xt.shape == x.shape
        assert lhs == pytest.approx((x * xt).sum(), rel=1e-12)

    def test_correlation_matches_loops(self, rng):
        f1 = rng.standard_normal((2, 3, 5, 6))
        f2 = rng.standard_normal((2, 3, 5, 6))
        np.testing.assert_allclose(T.correlation(Tensor(f1), Tensor(f2), 2).data,
                                   brute_correlation(f1, f2, 2), atol=1e-12)

    def test_correlation_peaks_at_shift(self, rng):
        f1 = rng.standard_normal((1, 16, 8, 8))
        f2 = np.roll(f1, (1, -2), axis=(2, 3))  # content moves by dy=1, dx=-2
        c = T.correlation(Tensor(f1), Tensor(f2), 3).data[0, :, 3, 4]
        assert np.argmax(c) == (1 + 3) * 7 + (-2 + 3)

    def test_upsample_exact_at_aligned_pixels(self, rng):
        x = rng.standard_normal((1, 2, 4, 5))
        up = T.upsample_bilinear(Tensor(x), 4).data
        assert up.shape == (1, 2, 16, 20)
        np.testing.assert_array_equal(up[..., ::4, ::4], x)
        # halfway between two source pixels is their mean
        np.testing.assert_allclose(up[..., 0, 2], (x[..., 0, 0] + x[..., 0, 1]) / 2)

    def test_leaky_relu_values(self):
        out = T.leaky_relu(Tensor(np.array([-2.0, 0.0, 3.0])), 0.1).data
        np.testing.assert_allclose(out, [-0.2, 0.0, 3.0])

    def test_avg_pool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_allclose(T.avg_pool(x, 2)[0, 0], [[2.5, 4.5], [10.5, 12.5]])


class TestGradients:
    """Analytic gradients against central differences in f64."""

    def test_conv2d(self, rng):
        x = rng.standard_normal((2, 3, 7, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        assert fd_check(lambda x, w, b: T.conv2d(x, w, b, 2, 1), [x, w, b]) < 1e-6

    def test_dilated_conv2d(self, rng):
        x = rng.standard_normal((1, 2, 8, 8))
        w = rng.standard_normal((3, 2, 3, 3))
        assert fd_check(lambda x, w: T.conv2d(x, w, None, 1, 2, 2), [x, w]) < 1e-6

    def test_transposed_conv2d(self, rng):
        x = rng.standard_normal((2, 3, 4, 5))
        w = rng.standard_normal((3, 2, 4, 4))
        b = rng.standard_normal(2)
        assert fd_check(lambda x, w, b: T.transposed_conv2d(x, w, b, 2, 1), [x, w, b]) < 1e-6

    def test_leaky_relu(self, rng):
        x = rng.standard_normal((3, 4))
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        assert fd_check(lambda x: T.leaky_relu(x, 0.1), [x]) < 1e-6

    def test_correlation(self, rng):
        f1 = rng.standard_normal((1, 3, 5, 5))
        f2 = rng.standard_normal((1, 3, 5, 5))
        assert fd_check(lambda a, b: T.correlation(a, b, 2), [f1, f2]) < 1e-6

    def test_upsample(self, rng):
        x = rng.standard_normal((1, 2, 3, 4))
        assert fd_check(lambda x: T.upsample_bilinear(x, 4), [x]) < 1e-6

    def test_concat(self, rng):
        a = rng.standard_normal((2, 2, 3, 3))
        b = rng.standard_normal((2, 1, 3, 3))
        assert fd_check(lambda a, b: T.concat_channels([a, b]), [a, b]) < 1e-6
        c = rng.standard_normal((1, 2, 3, 3))
        assert fd_check(lambda a, c: T.concat_batch([a, c]), [a, c]) < 1e-6

    def test_elementwise_and_reductions(self, rng):
        a = rng.standard_normal((3, 4))
        b = rng.uniform(0.5, 2.0, size=(4,))
        assert fd_check(lambda a, b: (a * b + a / b - b).sum(axis=0), [a, b]) < 1e-6
        assert fd_check(lambda a: T.sqrt(a * a + 1.0).mean(axis=1, keepdims=True), [a]) < 1e-6
        assert fd_check(lambda a: a[1:, ::2].reshape(-1), [a]) < 1e-6

    def test_gather_and_scatter(self, rng):
        x = rng.standard_normal((3, 4, 4))
        idx = rng.integers(0, 16, size=(4, 6))
        wts = rng.uniform(size=(4, 6))
        assert fd_check(lambda x: T.gather_linear(x, idx, wts), [x]) < 1e-6
        base = rng.standard_normal((2, 3, 4, 4))
        vals = rng.standard_normal((3, 5))
        pos = np.array([0, 3, 5, 9, 15])
        assert fd_check(lambda b, v: T.scatter_overwrite(b, v, pos), [base, vals]) < 1e-6

    @settings(max_examples=15, deadline=None)
    @given(h=st.integers(3, 8), w=st.integers(3, 8), c=st.integers(1, 3),
           k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 2), seed=st.integers(0, 10 ** 6))
    def test_conv2d_random_shapes(self, h, w, c, k, stride, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((1, c, h, w))
        wt = r.standard_normal((2, c, k, k))
        assert fd_check(lambda x, wt: T.conv2d(x, wt, None, stride, k // 2), [x, wt]) < 1e-5


class TestTape:
    def test_no_recording_without_tape(self):
        a = Tensor(np.ones(3), requires_grad=True)
        out = a * 2.0
        assert not out.requires_grad

    def test_backward_overwrites(self):
        a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = (a * a).sum()
            backward(tape, loss)
        np.testing.assert_allclose(a.grad, [2.0, 4.0])

    def test_float32_not_promoted_by_scalars(self):
        a = Tensor(np.ones(3, dtype=np.float32))
        assert (a * 0.5 + 1.0).dtype == np.float32

    def test_backward_needs_scalar(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            out = a * 2.0
        with pytest.raises(ShapeError):
            backward(tape, out)


class TestErrors:
    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_correlation_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.correlation(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((1, 3, 5, 6))), 1)

    @pytest.mark.parametrize("slope", [0.0, 1.0, -0.1])
    def test_leaky_slope_range(self, slope):
        with pytest.raises(ValueError):
            T.leaky_relu(Tensor(np.zeros(2)), slope)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            T.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])
