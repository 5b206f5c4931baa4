import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdan import tensor as T
from mdan.tensor import ConvKernel, ShapeError

from conftest import finite_diff, rel_err


def naive_conv(x, w, b, stride, pad):
    """Six nested loops; summation order bias, channel, ky, kx."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[oc]
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                yy = i * stride + ky - pad
                                xx = j * stride + kx - pad
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += w[oc, ci, ky, kx] * x[bi, ci, yy, xx]
                    out[bi, oc, i, j] = acc
    return out


def naive_max_pool(x, k, s):
    n, c, h, w = x.shape
    oh, ow = (h - k) // s + 1, (w - k) // s + 1
    out = np.empty((n, c, oh, ow))
    for a in range(n):
        for b in range(c):
            for i in range(oh):
                for j in range(ow):
                    best = -math.inf
                    for dy in range(k):
                        for dx in range(k):
                            best = max(best, x[a, b, i * s + dy, j * s + dx])
                    out[a, b, i, j] = best
    return out


class TestConv2d:
    def test_scalar_multiply(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 3.0), np.zeros(1))
        assert T.conv2d(np.full((1, 1, 1, 1), 2.0), k)[0, 0, 0, 0] == 6.0

    def test_identity_kernel(self, rng):
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        x = rng.normal(size=(1, 1, 4, 4))
        np.testing.assert_array_equal(T.conv2d(x, ConvKernel(w, padding=1)), x)

    def test_matches_loop_oracle_exactly(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = T.conv2d(x, ConvKernel(w, b, padding=1))
        np.testing.assert_array_equal(out, naive_conv(x, w, b, 1, 1))

    @pytest.mark.parametrize("shape,k,stride,pad", [
        ((2, 3, 7, 5), 3, 1, 1),
        ((1, 2, 8, 8), 3, 2, 1),
        ((1, 4, 9, 6), 1, 1, 0),
        ((2, 1, 6, 7), 5, 1, 2),
        ((1, 3, 5, 5), 3, 2, 0),
    ])
    def test_oracle_grid(self, rng, shape, k, stride, pad):
        x = rng.normal(size=shape)
        w = rng.normal(size=(2, shape[1], k, k))
        b = rng.normal(size=2)
        out = T.conv2d(x, ConvKernel(w, b, stride, pad))
        np.testing.assert_array_equal(out, naive_conv(x, w, b, stride, pad))

    def test_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(1, 3, 4, 4\).*\(2, 2, 3, 3\)"):
            T.conv2d(np.zeros((1, 3, 4, 4)), ConvKernel(np.zeros((2, 2, 3, 3))))

    def test_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            T.conv2d(np.zeros((1, 1, 2, 2)), ConvKernel(np.zeros((1, 1, 5, 5))))

    def test_bad_bias(self):
        with pytest.raises(ShapeError):
            ConvKernel(np.zeros((2, 1, 3, 3)), np.zeros(3))

    def test_stride_two_halves(self, rng):
        y = T.conv2d(rng.normal(size=(1, 2, 8, 12)), ConvKernel(rng.normal(size=(2, 2, 3, 3)), stride=2, padding=1))
        assert y.shape == (1, 2, 4, 6)


class TestConv2dBackward:
    def test_zero_upstream(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        k = ConvKernel(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), padding=1)
        gx, gw, gb = T.conv2d_backward(x, k, np.zeros((1, 3, 5, 5)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_scalar_product_rule(self):
        k = ConvKernel(np.full((1, 1, 1, 1), 3.0), np.zeros(1))
        gx, gw, gb = T.conv2d_backward(np.full((1, 1, 1, 1), 2.0), k, np.ones((1, 1, 1, 1)))
        assert (gx.item(), gw.item(), gb.item()) == (3.0, 2.0, 1.0)

    def test_no_bias_returns_none(self, rng):
        k = ConvKernel(rng.normal(size=(1, 1, 1, 1)))
        assert T.conv2d_backward(np.ones((1, 1, 2, 2)), k, np.ones((1, 1, 2, 2)))[2] is None

    def test_shape_mismatch(self, rng):
        k = ConvKernel(rng.normal(size=(2, 1, 3, 3)), padding=1)
        with pytest.raises(ShapeError):
            T.conv2d_backward(np.ones((1, 1, 4, 4)), k, np.ones((1, 2, 3, 3)))

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0), (2, 0)])
    def test_finite_differences(self, rng, stride, pad):
        x = rng.normal(size=(2, 2, 7, 6))
        k = ConvKernel(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), stride, pad)
        g = rng.normal(size=T.conv2d(x, k).shape)

        def loss():
            return float(np.sum(T.conv2d(x, k) * g))

        gx, gw, gb = T.conv2d_backward(x, k, g)
        assert rel_err(gx, finite_diff(loss, x)) < 1e-5
        assert rel_err(gw, finite_diff(loss, k.weight)) < 1e-5
        assert rel_err(gb, finite_diff(loss, k.bias)) < 1e-5


class TestShuffle:
    def test_definition(self):
        x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)
        np.testing.assert_array_equal(T.pixel_shuffle(x, 2)[0, 0], [[1, 2], [3, 4]])
        np.testing.assert_array_equal(T.space_to_depth(T.pixel_shuffle(x, 2), 2), x)

    def test_index_formula(self, rng):
        x = rng.normal(size=(2, 8, 3, 4))
        y = T.pixel_shuffle(x, 2)
        for c in range(2):
            for h in range(3):
                for w in range(4):
                    for dy in range(2):
                        for dx in range(2):
                            assert y[1, c, 2 * h + dy, 2 * w + dx] == x[1, 4 * c + 2 * dy + dx, h, w]

    def test_r1_identity(self, rng):
        x = rng.normal(size=(1, 3, 2, 5))
        np.testing.assert_array_equal(T.pixel_shuffle(x, 1), x)
        np.testing.assert_array_equal(T.space_to_depth(x, 1), x)

    def test_errors(self):
        with pytest.raises(ShapeError):
            T.pixel_shuffle(np.zeros((1, 3, 2, 2)), 2)
        with pytest.raises(ShapeError):
            T.space_to_depth(np.zeros((1, 1, 3, 2)), 2)

    def test_bijection_on_indices(self):
        # every index appears exactly once after either direction
        for shape in [(2, 8, 4, 4), (1, 4, 2, 3), (2, 4, 1, 1)]:
            x = np.arange(np.prod(shape), dtype=np.float64).reshape(shape)
            y = T.pixel_shuffle(x, 2)
            assert sorted(y.ravel()) == list(x.ravel())
            np.testing.assert_array_equal(T.space_to_depth(y, 2), x)
            np.testing.assert_array_equal(T.pixel_shuffle(T.space_to_depth(y, 2), 2), y)

    @settings(max_examples=40, deadline=None)
    @given(n=st.integers(1, 2), c=st.integers(1, 3), h=st.integers(1, 4), w=st.integers(1, 4),
           r=st.integers(1, 3), seed=st.integers(0, 2**16))
    def test_round_trip_property(self, n, c, h, w, r, seed):
        x = np.random.default_rng(seed).normal(size=(n, c * r * r, h, w))
        np.testing.assert_array_equal(T.space_to_depth(T.pixel_shuffle(x, r), r), x)


class TestPooling:
    def test_max_pool_trivial(self):
        x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
        assert T.max_pool2d(x).item() == 7.0
        np.testing.assert_array_equal(T.max_pool2d(np.full((1, 2, 4, 4), 2.5)), np.full((1, 2, 2, 2), 2.5))

    def test_max_pool_oracle(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        np.testing.assert_array_equal(T.max_pool2d(x), naive_max_pool(x, 2, 2))
        y = rng.normal(size=(1, 2, 7, 9))
        np.testing.assert_array_equal(T.max_pool2d(y, 3, 2), naive_max_pool(y, 3, 2))

    def test_max_pool_odd_trailing_dropped(self, rng):
        assert T.max_pool2d(rng.normal(size=(1, 1, 5, 7))).shape == (1, 1, 2, 3)

    def test_max_pool_window_too_large(self):
        with pytest.raises(ShapeError):
            T.max_pool2d(np.zeros((1, 1, 1, 4)))

    def test_max_pool_backward(self, rng):
        x = rng.normal(size=(2, 2, 6, 6))
        g = rng.normal(size=(2, 2, 3, 3))
        _, idx = T.max_pool2d_with_indices(x)
        gx = T.max_pool2d_backward(g, idx, x.shape)
        num = finite_diff(lambda: float(np.sum(T.max_pool2d(x) * g)), x)
        assert rel_err(gx, num) < 1e-5

    def test_global_pools(self, rng):
        x = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
        assert T.global_avg_pool(x).item() == 4.0
        assert T.global_max_pool(x).item() == 7.0
        c = np.full((2, 3, 4, 5), -1.25)
        np.testing.assert_array_equal(T.global_avg_pool(c), np.full((2, 3, 1, 1), -1.25))
        np.testing.assert_array_equal(T.global_max_pool(c), np.full((2, 3, 1, 1), -1.25))

    def test_global_pools_oracle(self, rng):
        x = rng.normal(size=(2, 3, 5, 4))
        for a in range(2):
            for b in range(3):
                vals = [x[a, b, i, j] for i in range(5) for j in range(4)]
                assert T.global_max_pool(x)[a, b, 0, 0] == max(vals)
                assert T.global_avg_pool(x)[a, b, 0, 0] == pytest.approx(sum(vals) / 20, rel=1e-14)

    def test_global_pool_backward(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        g = rng.normal(size=(2, 3, 1, 1))
        ga = T.global_avg_pool_backward(g, x.shape)
        gm = T.global_max_pool_backward(g, x)
        assert rel_err(ga, finite_diff(lambda: float(np.sum(T.global_avg_pool(x) * g)), x)) < 1e-5
        assert rel_err(gm, finite_diff(lambda: float(np.sum(T.global_max_pool(x) * g)), x)) < 1e-5

    def test_channel_reductions(self, rng):
        x = rng.normal(size=(2, 5, 3, 3))
        g = rng.normal(size=(2, 1, 3, 3))
        np.testing.assert_allclose(T.channel_mean(x)[:, 0], x.mean(axis=1), rtol=1e-14)
        np.testing.assert_array_equal(T.channel_max(x)[:, 0], x.max(axis=1))
        gm = T.channel_mean_backward(g, x.shape)
        gx = T.channel_max_backward(g, x)
        assert rel_err(gm, finite_diff(lambda: float(np.sum(T.channel_mean(x) * g)), x)) < 1e-5
        assert rel_err(gx, finite_diff(lambda: float(np.sum(T.channel_max(x) * g)), x)) < 1e-5


class TestElementwise:
    def test_sigmoid(self):
        assert T.sigmoid(np.zeros((1, 1, 1, 1))).item() == 0.5
        y = T.sigmoid(np.array([-700.0, -30.0, 0.0, 30.0, 700.0]).reshape(1, 1, 1, 5))
        assert np.all(np.isfinite(y))
        assert np.all((y >= 0) & (y <= 1))

    def test_sigmoid_strictly_inside_unit_interval(self, rng):
        y = T.sigmoid(rng.normal(scale=10, size=(2, 3, 8, 8)))
        assert np.all((y > 0) & (y < 1))

    def test_sigmoid_relu_backward(self, rng):
        x = rng.normal(size=(1, 2, 4, 4))
        g = rng.normal(size=x.shape)
        gs = T.sigmoid_backward(g, T.sigmoid(x))
        gr = T.relu_backward(g, x)
        assert rel_err(gs, finite_diff(lambda: float(np.sum(T.sigmoid(x) * g)), x)) < 1e-5
        assert rel_err(gr, finite_diff(lambda: float(np.sum(T.relu(x) * g)), x)) < 1e-5

    def test_add_mul_shape_checks(self):
        with pytest.raises(ShapeError):
            T.add(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))
        with pytest.raises(ShapeError):
            T.mul(np.zeros((1, 2, 2, 2)), np.zeros((1, 1, 2, 2)))
        np.testing.assert_array_equal(T.mul(np.full((1, 1, 1, 2), 2.0), np.full((1, 1, 1, 2), 3.0)), [[[[6, 6]]]])

    def test_broadcast_mul(self, rng):
        f = rng.normal(size=(2, 3, 4, 5))
        np.testing.assert_array_equal(T.broadcast_mul(f, np.ones((2, 1, 4, 5))), f)
        m = rng.random((2, 1, 4, 5))
        y = T.broadcast_mul(f, m)
        for a in range(2):
            for c in range(3):
                for i in range(4):
                    for j in range(5):
                        assert y[a, c, i, j] == f[a, c, i, j] * m[a, 0, i, j]
        with pytest.raises(ShapeError):
            T.broadcast_mul(f, np.ones((2, 2, 4, 5)))

    def test_broadcast_mul_backward(self, rng):
        f = rng.normal(size=(2, 3, 4, 4))
        m = rng.random((2, 1, 4, 4))
        g = rng.normal(size=f.shape)
        gf, gm = T.broadcast_mul_backward(g, f, m)

        def loss():
            return float(np.sum(T.broadcast_mul(f, m) * g))

        assert rel_err(gf, finite_diff(loss, f)) < 1e-5
        assert rel_err(gm, finite_diff(loss, m)) < 1e-5


class TestSoftmaxPair:
    def test_equal_logits(self, rng):
        a = rng.normal(size=(2, 4, 1, 1))
        s1, s2 = T.softmax_pair(a, a.copy())
        assert np.all(s1 == 0.5) and np.all(s2 == 0.5)

    def test_ln3(self):
        s1, s2 = T.softmax_pair(np.full((1, 1, 1, 1), math.log(3.0)), np.zeros((1, 1, 1, 1)))
        assert s1.item() == pytest.approx(0.75, abs=1e-15)
        assert s2.item() == pytest.approx(0.25, abs=1e-15)

    def test_extreme_logits_stay_finite(self):
        a = np.array([1000.0, -1000.0, 0.0]).reshape(1, 3, 1, 1)
        s1, s2 = T.softmax_pair(a, -a)
        assert np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))
        np.testing.assert_array_equal(s1 + s2, 1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=16))
    def test_sum_to_one(self, pairs):
        a = np.array([p[0] for p in pairs]).reshape(1, -1, 1, 1)
        b = np.array([p[1] for p in pairs]).reshape(1, -1, 1, 1)
        s1, s2 = T.softmax_pair(a, b)
        assert np.all(s1 >= 0) and np.all(s2 >= 0)
        assert np.abs(s1 + s2 - 1).max() <= 1e-12

    def test_backward(self, rng):
        a = rng.normal(size=(2, 3, 1, 1))
        b = rng.normal(size=(2, 3, 1, 1))
        g1, g2 = rng.normal(size=a.shape), rng.normal(size=a.shape)
        s1, s2 = T.softmax_pair(a, b)
        ga, gb = T.softmax_pair_backward(g1, g2, s1, s2)

        def loss():
            x1, x2 = T.softmax_pair(a, b)
            return float(np.sum(x1 * g1 + x2 * g2))

        assert rel_err(ga, finite_diff(loss, a)) < 1e-5
        assert rel_err(gb, finite_diff(loss, b)) < 1e-5
