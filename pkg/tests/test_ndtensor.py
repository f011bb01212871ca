import threading

import numpy as np
import pytest

from core import ndtensor as nd
from core.errors import ConfigError, ShapeError
from core.ndtensor import Tape, Tensor
from helpers import check_grad


class TestTape:
    def test_ops_outside_tape_are_not_recorded(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = nd.sum(x * 2.0)
        assert y.tape_node is None
        with pytest.raises(ConfigError):
            nd.backward(y)

    def test_ops_without_grad_inputs_are_not_recorded(self):
        with Tape() as tape:
            nd.sum(Tensor(np.ones(3)) * 2.0)
        assert len(tape) == 0

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            y = x * 2.0
            with pytest.raises(ShapeError):
                nd.backward(y)

    def test_gradient_accumulates_over_reuse(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with Tape():
            y = nd.sum(x * x + x)
            nd.backward(y)
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_tapes_are_per_thread(self):
        seen = {}

        def worker():
            seen["inner"] = nd.active_tape()

        with Tape() as outer:
            t = threading.Thread(target=worker)
            t.start()
            t.join()
            assert nd.active_tape() is outer
        assert seen["inner"] is None
        assert nd.active_tape() is None


class TestElementwiseGradients:
    @pytest.mark.parametrize("fn", [
        lambda x: nd.sum(nd.square(x)),
        lambda x: nd.sum(nd.sqrt(x)),
        lambda x: nd.sum(nd.exp(x)),
        lambda x: nd.sum(nd.log(x)),
        lambda x: nd.sum(nd.abs(x - 1.3)),
        lambda x: nd.sum(nd.relu(x - 1.3)),
        lambda x: nd.sum(nd.xlogx(x)),
        lambda x: nd.mean(x / (x + 1.0)),
        lambda x: nd.sum(nd.sum(x, axis=0) * nd.sum(x, axis=1)),
        lambda x: nd.sum(nd.square(nd.forward_diff(x, 0))) + nd.sum(nd.forward_diff(x, 1)),
    ])
    def test_matches_finite_differences(self, fn, rng):
        x = rng.uniform(0.5, 2.0, size=(16, 16))
        check_grad(fn, x, tol=1e-6)

    def test_xlogx_zero_is_zero(self):
        out = nd.xlogx(Tensor(np.array([0.0, 1.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_scalar_broadcast(self, rng):
        x = rng.normal(size=(4, 4))
        s = Tensor(np.array(3.0), requires_grad=True)
        with Tape():
            nd.backward(nd.sum(Tensor(x) * s))
        assert float(s.grad) == pytest.approx(x.sum())

    def test_mismatched_shapes_raise(self):
        with pytest.raises(ShapeError):
            nd.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_mean_of_constant_is_exact(self):
        assert nd.mean(Tensor(np.full((7, 7), 0.3))).item() == pytest.approx(0.3, abs=1e-15)


class TestConvolutionFamily:
    def test_conv2d_matches_direct_loop(self, rng):
        x = rng.normal(size=(2, 6, 6))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        out = nd.conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((3, 6, 6))
        for o in range(3):
            for i in range(6):
                for j in range(6):
                    expected[o, i, j] = np.sum(w[o] * xp[:, i:i + 3, j:j + 3]) + b[o]
        np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)

    def test_conv2d_gradients(self, rng):
        x = rng.normal(size=(2, 8, 8))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        weights = rng.normal(size=(3, 8, 8))
        check_grad(lambda t: nd.sum(nd.conv2d(t, Tensor(w), Tensor(b)) * weights), x)
        check_grad(lambda t: nd.sum(nd.conv2d(Tensor(x), t, Tensor(b)) * weights), w)
        check_grad(lambda t: nd.sum(nd.conv2d(Tensor(x), Tensor(w), t) * weights), b)

    def test_conv2d_channel_mismatch(self):
        with pytest.raises(ShapeError):
            nd.conv2d(Tensor(np.ones((3, 4, 4))), Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones(1)))

    def test_maxpool_values_and_gradient(self, rng):
        x = rng.normal(size=(2, 8, 8))
        out = nd.maxpool2x2(Tensor(x)).data
        np.testing.assert_array_equal(out, x.reshape(2, 4, 2, 4, 2).max(axis=(2, 4)))
        weights = rng.normal(size=(2, 4, 4))
        check_grad(lambda t: nd.sum(nd.maxpool2x2(t) * weights), x)

    def test_maxpool_tie_goes_to_first(self):
        x = Tensor(np.ones((1, 2, 2)), requires_grad=True)
        with Tape():
            nd.backward(nd.sum(nd.maxpool2x2(x)))
        np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])

    def test_maxpool_odd_size_raises(self):
        with pytest.raises(ShapeError):
            nd.maxpool2x2(Tensor(np.ones((1, 3, 4))))

    def test_upconv_gradients(self, rng):
        x = rng.normal(size=(3, 4, 4))
        w = rng.normal(size=(3, 2, 2, 2))
        b = rng.normal(size=2)
        weights = rng.normal(size=(2, 8, 8))
        out = nd.upconv2x2(Tensor(x), Tensor(w), Tensor(b)).data
        assert out.shape == (2, 8, 8)
        assert out[1, 3, 4] == pytest.approx(np.dot(x[:, 1, 2], w[:, 1, 1, 0]) + b[1])
        check_grad(lambda t: nd.sum(nd.upconv2x2(t, Tensor(w), Tensor(b)) * weights), x)
        check_grad(lambda t: nd.sum(nd.upconv2x2(Tensor(x), t, Tensor(b)) * weights), w)

    def test_conv2d_is_linear(self, rng):
        x, y = rng.normal(size=(2, 2, 8, 8))
        w = Tensor(rng.normal(size=(3, 2, 3, 3)))
        zero = Tensor(np.zeros(3))
        a, b = 1.7, -0.4
        combined = nd.conv2d(Tensor(a * x + b * y), w, zero).data
        separate = a * nd.conv2d(Tensor(x), w, zero).data + b * nd.conv2d(Tensor(y), w, zero).data
        np.testing.assert_allclose(combined, separate, rtol=0, atol=1e-12)

    def test_upconv_is_adjoint_of_strided_conv(self, rng):
        x = rng.normal(size=(3, 4, 4))
        w = rng.normal(size=(3, 2, 2, 2))
        z = rng.normal(size=(2, 8, 8))
        up = nd.upconv2x2(Tensor(x), Tensor(w), Tensor(np.zeros(2))).data
        # stride-2 2x2 convolution with the same weights, read the other way round
        down = np.einsum("coab,oiajb->cij", w, z.reshape(2, 4, 2, 4, 2))
        assert np.sum(up * z) == pytest.approx(np.sum(x * down), rel=1e-10)

    def test_concat_and_split(self, rng):
        a = rng.normal(size=(2, 4, 4))
        b = rng.normal(size=(3, 4, 4))
        weights = rng.normal(size=(5, 4, 4))
        check_grad(lambda t: nd.sum(nd.concat_channels(t, Tensor(b)) * weights), a)
        lo, hi = nd.split_channels(Tensor(np.concatenate([a, b])), 2)
        np.testing.assert_array_equal(lo.data, a)
        np.testing.assert_array_equal(hi.data, b)


class TestFilters:
    def test_gaussian_kernel_is_normalized(self):
        k = nd.gaussian_kernel(1.5)
        assert len(k) == 2 * 5 + 1
        assert k.sum() == pytest.approx(1.0)

    def test_blur_preserves_constants(self):
        out = nd.gaussian_blur(Tensor(np.full((10, 12), 0.4)), 2.0).data
        np.testing.assert_allclose(out, 0.4, atol=1e-12)

    def test_blur_gradient(self, rng):
        x = rng.normal(size=(2, 12, 12))
        weights = rng.normal(size=(2, 12, 12))
        check_grad(lambda t: nd.sum(nd.gaussian_blur(t, 1.2) * weights), x)

    def test_box_filter_valid_windows(self, rng):
        x = rng.normal(size=(6, 7))
        out = nd.box_filter(Tensor(x), 3).data
        assert out.shape == (4, 5)
        assert out[1, 2] == pytest.approx(x[1:4, 2:5].mean())

    def test_box_filter_rejects_even_window(self):
        with pytest.raises(ConfigError):
            nd.box_filter(Tensor(np.ones((5, 5))), 4)

    def test_non_positive_sigma(self):
        with pytest.raises(ConfigError):
            nd.gaussian_kernel(0.0)


def test_float32_stays_float32(rng):
    x = Tensor(rng.normal(size=(1, 8, 8)).astype(np.float32))
    w = Tensor(rng.normal(size=(2, 1, 3, 3)).astype(np.float32), requires_grad=True)
    b = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    with Tape():
        out = nd.conv2d(x, w, b)
        nd.backward(nd.sum(nd.relu(out) * 0.5))
    assert out.dtype == np.float32
    assert w.grad.dtype == np.float32
