"""Convolution and batch normalization against naive-loop and moment oracles."""

import numpy as np
import pytest

from painvit import numerics as nx
from painvit.errors import ConfigurationError, DimensionError, StateError


def naive_depthwise(x, kernel, bias, stride, padding):
    """Nested-loop reference: one kernel per channel, no cross-channel mixing."""
    b, c, h, w = x.shape
    _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, c, ho, wo))
    for bi in range(b):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, ci, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, ci, i, j] = np.sum(patch * kernel[ci]) + bias[ci]
    return out


def naive_conv(x, kernel, bias, stride, padding):
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, cout, ho, wo))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
                    out[bi, co, i, j] = np.sum(patch * kernel[co]) + bias[co]
    return out


class TestDepthwiseConv:
    def test_zero_kernel_propagates_bias(self):
        x = nx.Tensor(np.random.default_rng(0).normal(size=(1, 1, 3, 3)))
        out = nx.depthwise_conv2d(x, nx.Tensor(np.zeros((1, 3, 3))), nx.Tensor([7.0]))
        assert np.array_equal(out.data, np.full((1, 1, 1, 1), 7.0))

    def test_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = nx.Tensor(rng.normal(size=(1, 2, 4, 4)))
        kernel = np.zeros((2, 3, 3))
        kernel[:, 1, 1] = 1.0
        out = nx.depthwise_conv2d(x, nx.Tensor(kernel), nx.Tensor(np.zeros(2)), 1, 1)
        assert np.array_equal(out.data, x.data)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 5, 5))
        kernel = rng.normal(size=(3, 3, 3))
        bias = rng.normal(size=3)
        for stride, padding in [(1, 0), (1, 1), (2, 1)]:
            out = nx.depthwise_conv2d(
                nx.Tensor(x), nx.Tensor(kernel), nx.Tensor(bias), stride, padding
            ).data
            expected = naive_depthwise(x, kernel, bias, stride, padding)
            assert np.max(np.abs(out - expected)) < 1e-12

    def test_never_mixes_channels(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 4, 6, 6))
        kernel = rng.normal(size=(4, 3, 3))
        bias = rng.normal(size=4)
        base = nx.depthwise_conv2d(nx.Tensor(x), nx.Tensor(kernel), nx.Tensor(bias), 1, 1).data
        for c in range(4):
            bumped = x.copy()
            bumped[:, c] += rng.normal(size=(2, 6, 6))
            out = nx.depthwise_conv2d(
                nx.Tensor(bumped), nx.Tensor(kernel), nx.Tensor(bias), 1, 1
            ).data
            others = [k for k in range(4) if k != c]
            assert np.array_equal(out[:, others], base[:, others])
            assert not np.array_equal(out[:, c], base[:, c])

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            nx.depthwise_conv2d(
                nx.Tensor(np.zeros((1, 1, 4, 4))), nx.Tensor(np.zeros((1, 2, 2))), None
            )

    def test_oversized_kernel_rejected(self):
        with pytest.raises(ConfigurationError):
            nx.depthwise_conv2d(
                nx.Tensor(np.zeros((1, 1, 2, 2))), nx.Tensor(np.zeros((1, 5, 5))), None
            )

    def test_channel_count_mismatch(self):
        with pytest.raises(DimensionError):
            nx.depthwise_conv2d(
                nx.Tensor(np.zeros((1, 2, 4, 4))), nx.Tensor(np.zeros((3, 3, 3))), None
            )

    def test_gradcheck(self):
        rng = np.random.default_rng(4)
        x = nx.Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        kernel = nx.Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        bias = nx.Tensor(rng.normal(size=2), requires_grad=True)
        readout = nx.Tensor(rng.normal(size=(2, 2, 3, 3)))

        def loss():
            out = nx.depthwise_conv2d(x, kernel, bias, 2, 1)
            return nx.tensor_sum(nx.relu(out * readout))

        assert nx.check_gradients(loss, [x, kernel, bias], sample_fraction=0.5) < 1e-6


class TestConv2d:
    def test_matches_naive_loop(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 6, 6))
        kernel = rng.normal(size=(4, 3, 3, 3))
        bias = rng.normal(size=4)
        for stride, padding in [(1, 1), (2, 1)]:
            out = nx.conv2d(nx.Tensor(x), nx.Tensor(kernel), nx.Tensor(bias), stride, padding).data
            expected = naive_conv(x, kernel, bias, stride, padding)
            assert np.max(np.abs(out - expected)) < 1e-12

    def test_stride_two_halves_even_extent(self):
        out = nx.conv2d(
            nx.Tensor(np.zeros((1, 1, 14, 14))), nx.Tensor(np.zeros((1, 1, 3, 3))), None, 2, 1
        )
        assert out.shape == (1, 1, 7, 7)

    def test_gradcheck(self):
        rng = np.random.default_rng(6)
        x = nx.Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True)
        kernel = nx.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        bias = nx.Tensor(rng.normal(size=3), requires_grad=True)
        readout = nx.Tensor(rng.normal(size=(2, 3, 3, 3)))

        def loss():
            return nx.tensor_sum(nx.relu(nx.conv2d(x, kernel, bias, 2, 1) * readout))

        assert nx.check_gradients(loss, [x, kernel, bias], sample_fraction=0.5) < 1e-6


class TestBatchNorm:
    def test_constant_channel_maps_to_zero(self):
        x = nx.Tensor(np.full((4, 2, 5), 3.0))
        stats = nx.RunningStats(2)
        out = nx.batch_norm(
            x, nx.Tensor(np.ones(2)), nx.Tensor(np.zeros(2)), stats, training=True, eps=1e-5
        )
        assert np.max(np.abs(out.data)) < 1e-6

    def test_zero_gamma_returns_beta(self):
        rng = np.random.default_rng(7)
        x = nx.Tensor(rng.normal(size=(3, 4, 2, 2)))
        stats = nx.RunningStats(4)
        out = nx.batch_norm(
            x, nx.Tensor(np.zeros(4)), nx.Tensor(np.full(4, 5.0)), stats, training=True
        )
        assert np.array_equal(out.data, np.full(x.shape, 5.0))

    def test_train_mode_moments(self):
        rng = np.random.default_rng(8)
        x = nx.Tensor(rng.normal(loc=2.0, scale=3.0, size=(8, 4, 6)))
        stats = nx.RunningStats(4)
        out = nx.batch_norm(
            x, nx.Tensor(np.ones(4)), nx.Tensor(np.zeros(4)), stats, training=True, eps=1e-12
        ).data
        assert np.max(np.abs(out.mean(axis=(0, 2)))) < 1e-10
        assert np.max(np.abs(out.var(axis=(0, 2)) - 1.0)) < 1e-6

    def test_eval_before_train_raises(self):
        x = nx.Tensor(np.ones((2, 3, 4)))
        with pytest.raises(StateError):
            nx.batch_norm(
                x, nx.Tensor(np.ones(3)), nx.Tensor(np.zeros(3)), nx.RunningStats(3),
                training=False,
            )

    def test_eval_is_pure_and_deterministic(self):
        rng = np.random.default_rng(9)
        x = nx.Tensor(rng.normal(size=(4, 3, 5)))
        gamma, beta = nx.Tensor(rng.normal(size=3)), nx.Tensor(rng.normal(size=3))
        stats = nx.RunningStats(3)
        nx.batch_norm(x, gamma, beta, stats, training=True)
        mean_before, var_before = stats.mean.copy(), stats.var.copy()
        a = nx.batch_norm(x, gamma, beta, stats, training=False).data
        b = nx.batch_norm(x, gamma, beta, stats, training=False).data
        assert np.array_equal(a, b)
        assert np.array_equal(stats.mean, mean_before)
        assert np.array_equal(stats.var, var_before)

    def test_running_stats_ema(self):
        stats = nx.RunningStats(2, momentum=0.1)
        stats.update(np.array([1.0, 2.0]), np.array([4.0, 9.0]))
        # first batch seeds the stats directly
        assert np.array_equal(stats.mean, [1.0, 2.0])
        stats.update(np.array([3.0, 4.0]), np.array([1.0, 1.0]))
        assert np.allclose(stats.mean, [0.9 * 1.0 + 0.1 * 3.0, 0.9 * 2.0 + 0.1 * 4.0])
        assert np.allclose(stats.var, [0.9 * 4.0 + 0.1 * 1.0, 0.9 * 9.0 + 0.1 * 1.0])

    def test_gradcheck_train_mode(self):
        rng = np.random.default_rng(10)
        x = nx.Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
        gamma = nx.Tensor(rng.normal(size=2) + 1.0, requires_grad=True)
        beta = nx.Tensor(rng.normal(size=2), requires_grad=True)
        readout = nx.Tensor(rng.normal(size=(3, 2, 4)))
        stats = nx.RunningStats(2)

        def loss():
            out = nx.batch_norm(x, gamma, beta, stats, training=True)
            return nx.tensor_sum(nx.relu(out * readout) + 0.1 * nx.power(out, 3.0))

        assert nx.check_gradients(loss, [x, gamma, beta]) < 1e-6

    def test_gradcheck_eval_mode(self):
        rng = np.random.default_rng(11)
        x = nx.Tensor(rng.normal(size=(3, 2, 4)), requires_grad=True)
        gamma = nx.Tensor(rng.normal(size=2) + 1.0, requires_grad=True)
        beta = nx.Tensor(rng.normal(size=2), requires_grad=True)
        readout = nx.Tensor(rng.normal(size=(3, 2, 4)))
        stats = nx.RunningStats(2)
        nx.batch_norm(x, gamma, beta, stats, training=True)

        def loss():
            out = nx.batch_norm(x, gamma, beta, stats, training=False)
            return nx.tensor_sum(nx.relu(out * readout))

        assert nx.check_gradients(loss, [x, gamma, beta]) < 1e-6

    def test_invalid_eps(self):
        with pytest.raises(ConfigurationError):
            nx.batch_norm(
                nx.Tensor(np.ones((2, 2))), nx.Tensor(np.ones(2)), nx.Tensor(np.zeros(2)),
                nx.RunningStats(2), training=True, eps=0.0,
            )
