import numpy as np
import pytest

from seqseg import ops
from seqseg.errors import ConfigurationError, ContractViolation, NumericError
from seqseg.tensor import BatchNormParams, KernelBank

from oracles import bilinear_upsample_oracle, conv2d_oracle, maxpool2_oracle, softmax_channels_oracle


def proj_loss(y, r):
    return float((y * r).sum())


class TestConv2d:
    def test_one_by_one_kernel_scales(self):
        x = np.ones((1, 1, 3, 3))
        k = KernelBank(np.full((1, 1, 1, 1), 2.0), np.zeros(1))
        y = ops.conv2d(x, k)
        assert np.array_equal(y, np.full((1, 1, 3, 3), 2.0))

    def test_two_by_two_against_oracle(self):
        # expected map computed with the nested-loop oracle before freezing
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        k = KernelBank(np.ones((1, 1, 3, 3)), np.zeros(1))
        expected = conv2d_oracle(x, k.weights, k.bias)
        assert np.array_equal(expected, np.full((1, 1, 2, 2), 10.0))
        assert np.allclose(ops.conv2d(x, k), expected, atol=1e-12)

    def test_zero_input_gives_bias(self):
        rng = np.random.default_rng(0)
        k = KernelBank(rng.standard_normal((4, 2, 3, 3)), np.array([1.0, -2.0, 0.5, 3.0]))
        y = ops.conv2d(np.zeros((2, 2, 5, 6)), k)
        assert np.allclose(y, k.bias[None, :, None, None] * np.ones((2, 4, 5, 6)))

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    @pytest.mark.parametrize("seed", range(3))
    def test_random_against_oracle(self, seed, stride, padding):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 6, 8))
        k = KernelBank(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
        got = ops.conv2d(x, k, stride=stride, padding=padding)
        want = conv2d_oracle(x, k.weights, k.bias, stride=stride, padding=padding)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-12)

    def test_linearity(self, rng):
        xa = rng.standard_normal((1, 2, 5, 5))
        xb = rng.standard_normal((1, 2, 5, 5))
        k = KernelBank(rng.standard_normal((3, 2, 3, 3)), np.zeros(3))
        lhs = ops.conv2d(2.5 * xa - 1.5 * xb, k)
        rhs = 2.5 * ops.conv2d(xa, k) - 1.5 * ops.conv2d(xb, k)
        assert np.max(np.abs(lhs - rhs)) < 1e-10

    def test_channel_mismatch_raises(self, rng):
        k = KernelBank(rng.standard_normal((2, 3, 3, 3)), np.zeros(2))
        with pytest.raises(ContractViolation):
            ops.conv2d(np.zeros((1, 2, 4, 4)), k)

    def test_nonfinite_input_raises(self, rng):
        k = KernelBank(rng.standard_normal((2, 1, 3, 3)), np.zeros(2))
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 1, 1] = np.nan
        with pytest.raises(NumericError):
            ops.conv2d(x, k)

    def test_bad_stride_raises(self, rng):
        k = KernelBank(rng.standard_normal((1, 1, 3, 3)), np.zeros(1))
        with pytest.raises(ContractViolation):
            ops.conv2d(np.zeros((1, 1, 4, 4)), k, stride=3)

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid")])
    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed, stride, padding):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 5, 6))
        k = KernelBank(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
        out_shape = ops.conv2d(x, k, stride=stride, padding=padding).shape
        r = rng.standard_normal(out_shape)

        def f():
            return proj_loss(ops.conv2d(x, k, stride=stride, padding=padding), r)

        dx, dw, db = ops.conv2d_backward(r, x, k, stride=stride, padding=padding)
        assert ops.finite_diff_check(f, x, dx, rng=rng) < 1e-4
        assert ops.finite_diff_check(f, k.weights, dw, rng=rng) < 1e-4
        assert ops.finite_diff_check(f, k.bias, db, rng=rng) < 1e-4

    def test_linear_op_gradient_near_exact(self, rng):
        # conv is linear, so central differences are exact up to roundoff
        x = rng.standard_normal((1, 2, 4, 4))
        k = KernelBank(rng.standard_normal((2, 2, 3, 3)), np.zeros(2))
        r = rng.standard_normal((1, 2, 4, 4))
        dx, _, _ = ops.conv2d_backward(r, x, k)
        err = ops.finite_diff_check(lambda: proj_loss(ops.conv2d(x, k), r), x, dx, eps=1e-4)
        assert err < 1e-9


class TestMaxpool2:
    def test_single_window(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        y, arg = ops.maxpool2(x)
        assert y.shape == (1, 1, 1, 1) and y[0, 0, 0, 0] == 4.0
        assert arg[0, 0, 0, 0] == 3  # flattened position (1,1)

    def test_constant_map(self):
        y, _ = ops.maxpool2(np.full((1, 2, 4, 6), 7.5))
        assert y.shape == (1, 2, 2, 3)
        assert np.array_equal(y, np.full((1, 2, 2, 3), 7.5))

    @pytest.mark.parametrize("seed", range(5))
    def test_random_against_window_scan(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 1, 4, 4))
        y, _ = ops.maxpool2(x)
        assert np.array_equal(y, maxpool2_oracle(x))

    def test_odd_dims_padded(self, rng):
        x = rng.standard_normal((1, 1, 5, 7))
        y, _ = ops.maxpool2(x)
        assert y.shape == (1, 1, 3, 4)
        # last output col only sees the real (unpadded) elements
        assert y[0, 0, 0, 3] == max(x[0, 0, 0, 6], x[0, 0, 1, 6])

    def test_backward_conserves_gradient_mass(self, rng):
        x = rng.standard_normal((2, 3, 6, 8))
        _, arg = ops.maxpool2(x)
        gy = rng.standard_normal((2, 3, 3, 4))
        dx = ops.maxpool2_backward(gy, arg, x.shape)
        assert dx.shape == x.shape
        assert np.isclose(dx.sum(), gy.sum())

    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        # spread values out to keep argmax stable under the probe step
        x = rng.permutation(48).astype(np.float64).reshape(1, 2, 4, 6)
        r = rng.standard_normal((1, 2, 2, 3))
        _, arg = ops.maxpool2(x)
        dx = ops.maxpool2_backward(r, arg, x.shape)
        err = ops.finite_diff_check(lambda: proj_loss(ops.maxpool2(x)[0], r), x, dx)
        assert err < 1e-4


class TestBilinearUpsample:
    def test_constant_exact(self):
        y = ops.bilinear_upsample(np.full((1, 1, 3, 4), 5.0), 2)
        assert y.shape == (1, 1, 6, 8)
        assert np.allclose(y, 5.0, atol=1e-12)

    def test_linear_ramp_interior(self):
        x = np.array([0.0, 2.0]).reshape(1, 1, 1, 2)
        y = ops.bilinear_upsample(x, 2)[0, 0, 0]
        # sources for the two interior samples sit at 0.25 and 0.75
        assert np.allclose(y[1:3], [0.5, 1.5], atol=1e-12)

    @pytest.mark.parametrize("factor", [2, 4, 8])
    @pytest.mark.parametrize("seed", range(3))
    def test_random_against_weight_table(self, seed, factor):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 1, 3, 3))
        assert np.allclose(
            ops.bilinear_upsample(x, factor), bilinear_upsample_oracle(x, factor), atol=1e-12
        )

    def test_unsupported_factor(self):
        with pytest.raises(ConfigurationError):
            ops.bilinear_upsample(np.zeros((1, 1, 2, 2)), 3)

    @pytest.mark.parametrize("seed", range(10))
    def test_backward_is_transpose(self, seed):
        # <Ax, y> == <x, A^T y> for random probes
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 2, 3, 4))
        gy = rng.standard_normal((1, 2, 6, 8))
        lhs = (ops.bilinear_upsample(x, 2) * gy).sum()
        rhs = (x * ops.bilinear_upsample_backward(gy, 2, (3, 4))).sum()
        assert np.isclose(lhs, rhs, atol=1e-10)


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        p = BatchNormParams.identity(3)
        x = rng.standard_normal((2, 3, 4, 4)) * 3.0 + 1.0
        y = ops.batchnorm(x, p, "train")
        assert np.allclose(y.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
        assert np.allclose(y.var(axis=(0, 2, 3)), 1.0, atol=1e-3)  # within eps effect

    def test_gamma_beta_shift(self, rng):
        p = BatchNormParams.identity(2)
        p.gamma[:] = 2.0
        p.beta[:] = 3.0
        x = rng.standard_normal((2, 2, 4, 4))
        y = ops.batchnorm(x, p, "train")
        assert np.allclose(y.mean(axis=(0, 2, 3)), 3.0, atol=1e-10)

    def test_running_stats_updated_and_used(self, rng):
        p = BatchNormParams.identity(2, momentum=0.5)
        x = rng.standard_normal((4, 2, 3, 3)) + 2.0
        ops.batchnorm(x, p, "train")
        expected_mean = 0.5 * x.mean(axis=(0, 2, 3))
        assert np.allclose(p.running_mean, expected_mean)
        y = ops.batchnorm(x, p, "infer")
        xhat = (x - p.running_mean[:, None, None]) / np.sqrt(p.running_var + p.eps)[:, None, None]
        assert np.allclose(y, xhat)

    def test_zero_variance_channel_no_error(self):
        p = BatchNormParams.identity(1)
        y = ops.batchnorm(np.full((2, 1, 3, 3), 4.0), p, "train")
        assert np.isfinite(y).all()
        assert np.allclose(y, 0.0, atol=1e-6)

    @pytest.mark.parametrize("phase", ["train", "infer"])
    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed, phase):
        rng = np.random.default_rng(seed)
        p = BatchNormParams.identity(3)
        p.gamma[:] = rng.uniform(0.5, 1.5, size=3)
        p.beta[:] = rng.standard_normal(3)
        p.running_mean[:] = rng.standard_normal(3)
        p.running_var[:] = rng.uniform(0.5, 2.0, size=3)
        x = rng.standard_normal((2, 3, 4, 4))
        r = rng.standard_normal((2, 3, 4, 4))
        frozen = BatchNormParams(
            p.gamma, p.beta, p.running_mean.copy(), p.running_var.copy(), p.momentum, p.eps
        )

        def f():
            q = BatchNormParams(
                frozen.gamma, frozen.beta, frozen.running_mean.copy(),
                frozen.running_var.copy(), frozen.momentum, frozen.eps,
            )
            return proj_loss(ops.batchnorm(x, q, phase), r)

        dx, dg, db = ops.batchnorm_backward(r, x, frozen, phase)
        assert ops.finite_diff_check(f, x, dx, rng=rng) < 1e-4
        assert ops.finite_diff_check(f, frozen.gamma, dg, rng=rng) < 1e-6
        assert ops.finite_diff_check(f, frozen.beta, db, rng=rng) < 1e-6


class TestPointwise:
    def test_fixed_points(self):
        z = np.zeros((1, 1, 2, 2))
        assert np.allclose(ops.pointwise(z, "sigmoid"), 0.5)
        assert np.allclose(ops.pointwise(z, "tanh"), 0.0)
        assert np.allclose(ops.pointwise(np.full((1, 1, 2, 2), -3.0), "relu"), 0.0)

    def test_sigmoid_stable_at_extremes(self):
        x = np.array([[-1000.0, 1000.0]]).reshape(1, 1, 1, 2)
        y = ops.pointwise(x, "sigmoid")
        assert np.isfinite(y).all()
        assert y[0, 0, 0, 0] == 0.0 and y[0, 0, 0, 1] == 1.0

    def test_unknown_function(self):
        with pytest.raises(ConfigurationError):
            ops.pointwise(np.zeros((1, 1, 1, 1)), "gelu")

    @pytest.mark.parametrize("f", ["relu", "sigmoid", "tanh"])
    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed, f):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 2, 3, 3)) + 0.05  # keep away from relu kink
        r = rng.standard_normal((2, 2, 3, 3))
        dx = ops.pointwise_backward(r, x, f)
        err = ops.finite_diff_check(lambda: proj_loss(ops.pointwise(x, f), r), x, dx)
        assert err < 1e-6


class TestSoftmaxChannels:
    def test_uniform_logits(self):
        y = ops.softmax_channels(np.zeros((1, 5, 2, 2)))
        assert np.allclose(y, 0.2, atol=1e-15)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((1, 4, 3, 3))
        assert np.allclose(ops.softmax_channels(x), ops.softmax_channels(x + 100.0), atol=1e-12)

    def test_sums_to_one(self, rng):
        y = ops.softmax_channels(rng.standard_normal((2, 6, 4, 4)) * 5)
        assert np.allclose(y.sum(axis=1), 1.0, atol=1e-12)

    def test_against_direct_formula(self, rng):
        x = rng.standard_normal((1, 5, 2, 2))
        assert np.max(np.abs(ops.softmax_channels(x) - softmax_channels_oracle(x))) < 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((1, 4, 2, 3))
        r = rng.standard_normal((1, 4, 2, 3))
        y = ops.softmax_channels(x)
        dx = ops.softmax_channels_backward(r, y)
        err = ops.finite_diff_check(lambda: proj_loss(ops.softmax_channels(x), r), x, dx)
        assert err < 1e-6


class TestFiniteDiffHarness:
    def test_eps_validated(self):
        x = np.ones(3)
        with pytest.raises(ConfigurationError):
            ops.finite_diff_check(lambda: float(x.sum()), x, np.ones(3), eps=1e-2)

    def test_detects_wrong_gradient(self):
        x = np.ones(4)
        bad = np.full(4, 3.0)  # true gradient is 2x = 2
        err = ops.finite_diff_check(lambda: float((x ** 2).sum()), x, bad)
        assert err > 0.3

    def test_subsamples_large_tensors(self, rng):
        x = rng.standard_normal(1000)
        calls = []

        def f():
            calls.append(1)
            return float((x ** 2).sum())

        err = ops.finite_diff_check(f, x, 2 * x, rng=rng, max_coords=200)
        assert err < 1e-5
        assert len(calls) == 400
