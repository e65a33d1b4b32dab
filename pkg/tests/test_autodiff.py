import numpy as np
import pytest

from lesionlab import autodiff as ad
from lesionlab.autodiff import Tensor
from lesionlab.errors import ConfigError, DimensionError, UsageError
from lesionlab.layers import Adam, AdamState, adam_step

from gradcheck import finite_difference_check


def conv2d_reference(x, k, stride, padding):
    """Brute-force sliding-window convolution, loops only."""
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for ni in range(n):
        for oi in range(o):
            for i in range(oh):
                for j in range(ow):
                    block = xp[ni, :, i * stride : i * stride + kh,
                               j * stride : j * stride + kw]
                    out[ni, oi, i, j] = np.sum(block * k[oi])
    return out


class TestConv2d:
    def test_all_ones_3x3(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        y = ad.conv2d(x, k, stride=1, padding=0)
        assert y.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == 9.0

    def test_identity_kernel(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.random((2, 1, 6, 7)))
        k = Tensor(np.ones((1, 1, 1, 1)))
        y = ad.conv2d(x, k, stride=1, padding=0)
        np.testing.assert_array_equal(y.data, x.data)

    def test_stride2_blocks_match_reference(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 1, 4, 4))
        k = rng.normal(size=(1, 1, 2, 2))
        y = ad.conv2d(Tensor(x), Tensor(k), stride=2, padding=0)
        expected = conv2d_reference(x, k, 2, 0)
        assert y.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(y.data, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_random_against_reference(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 3, 6, 6))
        k = rng.normal(size=(4, 3, 2, 2))
        y = ad.conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
        np.testing.assert_allclose(
            y.data, conv2d_reference(x, k, stride, padding), atol=1e-12
        )

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 2, 2))))

    def test_non_exact_output_size(self):
        with pytest.raises(ConfigError):
            ad.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 2, 2))),
                      stride=2, padding=0)


class TestConvTranspose:
    def test_upsamples_single_pixel(self):
        x = Tensor(np.ones((1, 1, 1, 1)))
        k = Tensor(np.ones((1, 1, 2, 2)))
        y = ad.conv2d_transpose(x, k, stride=2, padding=0)
        np.testing.assert_array_equal(y.data, np.ones((1, 1, 2, 2)))

    def test_zero_input(self):
        k = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 4)))
        y = ad.conv2d_transpose(Tensor(np.zeros((1, 2, 3, 3))), k, stride=2, padding=1)
        assert not y.data.any()

    def test_doubles_spatial_dims(self):
        x = Tensor(np.zeros((1, 2, 8, 8)))
        k = Tensor(np.zeros((2, 1, 4, 4)))
        assert ad.conv2d_transpose(x, k, stride=2, padding=1).shape == (1, 1, 16, 16)

    def test_matches_materialized_transpose(self):
        # Build the explicit matrix of conv2d on a 4x4 input and check that
        # conv2d_transpose applies its transpose.
        rng = np.random.default_rng(11)
        k = rng.normal(size=(1, 1, 2, 2))
        stride, padding = 2, 0
        rows = []
        for i in range(16):
            e = np.zeros((1, 1, 4, 4))
            e.ravel()[i] = 1.0
            rows.append(conv2d_reference(e, k, stride, padding).ravel())
        conv_matrix = np.stack(rows, axis=1)  # (out_size, in_size)

        y = rng.normal(size=(1, 1, 2, 2))
        via_matrix = (conv_matrix.T @ y.ravel()).reshape(1, 1, 4, 4)
        via_op = ad.conv2d_transpose(Tensor(y), Tensor(k), stride, padding).data
        np.testing.assert_allclose(via_op, via_matrix, atol=1e-12)

    @pytest.mark.parametrize("stride,padding,ch", [(1, 0, 1), (2, 0, 2), (2, 1, 3)])
    def test_adjoint_identity(self, stride, padding, ch):
        # <conv(x), y> == <x, convT(y)> to 1e-9 on random small tensors.
        rng = np.random.default_rng(stride * 7 + padding + ch)
        x = rng.normal(size=(2, ch, 8, 8))
        k = rng.normal(size=(2, ch, 4, 4))
        cx = ad.conv2d(Tensor(x), Tensor(k), stride, padding)
        y = rng.normal(size=cx.shape)
        cty = ad.conv2d_transpose(Tensor(y), Tensor(k), stride, padding)
        lhs = np.vdot(cx.data, y)
        rhs = np.vdot(x, cty.data)
        assert abs(lhs - rhs) < 1e-9


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_extremes_stay_finite(self):
        y = ad.sigmoid(Tensor(np.array([-800.0, 800.0])))
        assert np.all(np.isfinite(y.data))

    def test_leaky_relu_definition(self):
        assert ad.leaky_relu(Tensor(-2.0), slope=0.2).item() == pytest.approx(-0.4)
        assert ad.leaky_relu(Tensor(3.0), slope=0.2).item() == 3.0

    def test_leaky_relu_slope_range(self):
        with pytest.raises(ConfigError):
            ad.leaky_relu(Tensor(1.0), slope=1.0)

    def test_dropout_rate_validation(self):
        with pytest.raises(ConfigError):
            ad.dropout(Tensor(np.ones(4)), 1.0, np.random.default_rng(0))

    def test_dropout_deterministic_per_seed(self):
        x = Tensor(np.ones((2, 8)))
        a = ad.dropout(x, 0.5, np.random.default_rng(42)).data
        b = ad.dropout(x, 0.5, np.random.default_rng(42)).data
        np.testing.assert_array_equal(a, b)

    def test_softplus_matches_naive(self):
        x = np.linspace(-20, 20, 41)
        naive = np.log1p(np.exp(x))
        np.testing.assert_allclose(ad.softplus(Tensor(x)).data, naive, rtol=1e-12)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


class TestInstanceNorm:
    def test_constant_channel_maps_to_bias(self):
        x = Tensor(np.full((2, 3, 4, 4), 9.0))
        y = ad.instance_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.abs(y.data).max() == 0.0

    def test_normalizes_mean_and_variance(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(2.0, 5.0, (1, 2, 8, 8)))
        y = ad.instance_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
        means = y.data.mean(axis=(2, 3))
        stds = y.data.std(axis=(2, 3))
        np.testing.assert_allclose(means, 0.0, atol=1e-12)
        np.testing.assert_allclose(stds, 1.0, atol=1e-4)

    def test_requires_spatial_extent(self):
        with pytest.raises(ConfigError):
            ad.instance_norm(Tensor(np.zeros((1, 1, 1, 1))),
                             Tensor(np.ones(1)), Tensor(np.zeros(1)))


class TestBackward:
    def test_linear_gradient(self):
        w = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        x = Tensor(np.array([4.0, 5.0, 6.0]))
        ad.sum_(ad.mul(w, x)).backward()
        np.testing.assert_array_equal(w.grad, x.data)

    def test_quadratic_gradient(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        ad.sum_(ad.mul(w, w)).backward()
        np.testing.assert_array_equal(w.grad, [6.0])

    def test_non_scalar_loss_rejected(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(UsageError):
            ad.mul(w, 2.0).backward()

    def test_repeated_backward_accumulates(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        loss = ad.sum_(ad.mul(w, w))
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(w.grad, [12.0])

    def test_detach_blocks_flow(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        y = ad.mul(w, 3.0).detach()
        loss = ad.sum_(ad.mul(y, y))
        loss.backward()
        assert w.grad is None

    def test_diamond_graph_sums_paths(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        a = ad.mul(w, 3.0)
        b = ad.mul(w, 4.0)
        ad.sum_(ad.add(a, b)).backward()
        np.testing.assert_array_equal(w.grad, [7.0])

    def test_two_layer_conv_net_gradients(self):
        rng = np.random.default_rng(21)
        x = Tensor(rng.normal(size=(1, 1, 8, 8)))
        k1 = Tensor(rng.normal(size=(2, 1, 3, 3)) * 0.5, requires_grad=True)
        k2 = Tensor(rng.normal(size=(1, 2, 3, 3)) * 0.5, requires_grad=True)

        def loss():
            h = ad.leaky_relu(ad.conv2d(x, k1, 1, 1), 0.2)
            out = ad.sigmoid(ad.conv2d(h, k2, 1, 1))
            return ad.mean_(ad.mul(out, out))

        finite_difference_check(loss, [k1, k2])


class TestGradientChecksPerOp:
    """Every differentiable op against central finite differences."""

    def _p(self, rng, shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    def test_conv2d(self):
        rng = np.random.default_rng(31)
        x = self._p(rng, (2, 2, 6, 6))
        k = self._p(rng, (3, 2, 4, 4))
        finite_difference_check(
            lambda: ad.mean_(ad.conv2d(x, k, stride=2, padding=1)), [x, k]
        )

    def test_conv2d_transpose(self):
        rng = np.random.default_rng(32)
        x = self._p(rng, (1, 3, 4, 4))
        k = self._p(rng, (3, 2, 4, 4))
        finite_difference_check(
            lambda: ad.mean_(ad.mul(ad.conv2d_transpose(x, k, 2, 1),
                                    ad.conv2d_transpose(x, k, 2, 1))), [x, k]
        )

    def test_instance_norm(self):
        rng = np.random.default_rng(33)
        x = self._p(rng, (2, 3, 5, 5))
        g = Tensor(rng.normal(1.0, 0.2, 3), requires_grad=True)
        b = Tensor(rng.normal(0.0, 0.2, 3), requires_grad=True)
        finite_difference_check(
            lambda: ad.mean_(ad.mul(ad.instance_norm(x, g, b),
                                    ad.instance_norm(x, g, b))), [x, g, b]
        )

    def test_activations(self):
        rng = np.random.default_rng(34)
        x = self._p(rng, (4, 5))
        finite_difference_check(lambda: ad.mean_(ad.leaky_relu(x, 0.2)), [x])
        finite_difference_check(lambda: ad.mean_(ad.sigmoid(x)), [x])
        finite_difference_check(lambda: ad.mean_(ad.softplus(x)), [x])
        finite_difference_check(lambda: ad.mean_(ad.abs_(x)), [x])

    def test_dropout(self):
        rng = np.random.default_rng(35)
        x = self._p(rng, (6, 6))
        finite_difference_check(
            lambda: ad.mean_(ad.dropout(x, 0.5, np.random.default_rng(9))), [x]
        )

    def test_arithmetic_and_concat(self):
        rng = np.random.default_rng(36)
        a = self._p(rng, (2, 3, 4, 4))
        b = self._p(rng, (2, 2, 4, 4))
        finite_difference_check(
            lambda: ad.mean_(ad.mul(ad.concat([a, b], axis=1),
                                    ad.concat([a, b], axis=1))), [a, b]
        )
        c = self._p(rng, (5,))
        d = Tensor(rng.normal(size=(5,)) + 3.0, requires_grad=True)
        finite_difference_check(lambda: ad.sum_(ad.div(c, d)), [c, d])

    def test_channel_bias(self):
        rng = np.random.default_rng(37)
        x = self._p(rng, (2, 3, 4, 4))
        b = self._p(rng, (3,))
        finite_difference_check(
            lambda: ad.mean_(ad.mul(ad.channel_bias(x, b), ad.channel_bias(x, b))),
            [x, b],
        )


class TestAdam:
    def test_first_step_is_scaled_sign(self):
        p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        g = np.array([0.3, -0.7, 1e-3])
        state = AdamState(learning_rate=0.01, beta1=0.5, beta2=0.999, epsilon=1e-8)
        adam_step([p], [g], state)
        # First-step closed form: delta = -lr * g / (|g| + eps)
        expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
        assert state.step_count == 1

    def test_zero_gradient_is_noop(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = AdamState()
        adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])

    def test_constant_gradient_moves_monotonically(self):
        # Hand-unrolled recurrence: both steps move opposite the gradient sign.
        p = Tensor(np.array([0.0]), requires_grad=True)
        state = AdamState(learning_rate=0.1)
        g = np.array([2.5])
        adam_step([p], [g], state)
        after_one = p.data.copy()
        adam_step([p], [g], state)
        assert after_one[0] < 0.0
        assert p.data[0] < after_one[0]

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(3), requires_grad=True)
        with pytest.raises(DimensionError):
            adam_step([p], [np.zeros(4)], AdamState())

    def test_invalid_hyperparameters(self):
        with pytest.raises(ConfigError):
            AdamState(beta1=1.0)
        with pytest.raises(ConfigError):
            AdamState(epsilon=0.0)

    def test_wrapper_determinism(self):
        def run():
            rng = np.random.default_rng(100)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            opt = Adam([w], learning_rate=0.01)
            x = Tensor(rng.normal(size=(4, 4)))
            for _ in range(5):
                opt.zero_grad()
                ad.mean_(ad.mul(ad.add(w, x), ad.add(w, x))).backward()
                opt.step()
            return w.data.tobytes()

        assert run() == run()
