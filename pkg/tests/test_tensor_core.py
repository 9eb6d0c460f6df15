from __future__ import annotations

import numpy as np
import pytest

from ct_diag import tensor_core as tc
from ct_diag.tensor_core import ConvSpec, Mode, Padding

from . import kernel_battery, oracles


def rel_err(ours, ref) -> float:
    scale = max(float(np.max(np.abs(ref))), 1e-12)
    return float(np.max(np.abs(np.asarray(ours, dtype=np.float64) - ref))) / scale


class TestOutSize:
    def test_exhaustive_against_formulas(self):
        for k in range(1, 6):
            for stride in range(1, 4):
                for size in range(1, 33):
                    assert tc.out_size(size, k, stride, Padding.SAME) == oracles.out_size(size, k, stride, True)
                    if size >= k:
                        assert tc.out_size(size, k, stride, Padding.VALID) == oracles.out_size(size, k, stride, False)

    def test_valid_smaller_than_kernel_rejected(self):
        with pytest.raises(ValueError, match="kernel"):
            tc.out_size(2, 3, 1, Padding.VALID)

    def test_known_values(self):
        # 224 -> 111 for the stem conv (3x3, stride 2, VALID), then SAME halvings.
        assert tc.out_size(224, 3, 2, Padding.VALID) == 111
        assert tc.out_size(111, 3, 2, Padding.SAME) == 56
        assert tc.out_size(299, 3, 2, Padding.VALID) == 149

    def test_asymmetric_same_padding_goes_after(self):
        # in=6, k=3, stride=2: one pad pixel total, and it must land on the high side.
        assert tc.pad_amounts(6, 3, 2, Padding.SAME) == (0, 1)
        assert tc.pad_amounts(5, 3, 2, Padding.SAME) == (1, 1)
        assert tc.pad_amounts(7, 3, 1, Padding.VALID) == (0, 0)


class TestConv2d:
    def test_agrees_with_loop_oracle(self):
        assert kernel_battery.run_conv_battery(25, seed=11) <= 1e-5

    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((2, 5, 5, 3)).astype(np.float32)
        kern = np.zeros((1, 1, 3, 3), dtype=np.float32)
        kern[0, 0] = np.eye(3)
        out = tc.conv2d(x, kern, ConvSpec(1, 1, 1, Padding.SAME))
        np.testing.assert_array_equal(out, x)

    def test_bias_added_per_output_channel(self):
        x = np.ones((1, 3, 3, 2), dtype=np.float32)
        kern = np.zeros((1, 1, 2, 2), dtype=np.float32)
        bias = np.array([1.5, -2.0], dtype=np.float32)
        out = tc.conv2d(x, kern, ConvSpec(1, 1), bias=bias)
        assert out[0, 0, 0, 0] == pytest.approx(1.5)
        assert out[0, 0, 0, 1] == pytest.approx(-2.0)

    def test_channel_mismatch_message_names_channels(self):
        x = np.zeros((1, 4, 4, 3), dtype=np.float32)
        kern = np.zeros((3, 3, 5, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="channel"):
            tc.conv2d(x, kern, ConvSpec(3, 3))

    def test_spec_kernel_shape_mismatch_rejected(self):
        x = np.zeros((1, 4, 4, 3), dtype=np.float32)
        kern = np.zeros((5, 5, 3, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="spec"):
            tc.conv2d(x, kern, ConvSpec(3, 3))

    def test_rank_validation(self):
        with pytest.raises(ValueError, match="rank"):
            tc.conv2d(np.zeros((4, 4, 3)), np.zeros((3, 3, 3, 2)), ConvSpec(3, 3))

    def test_deterministic_rerun(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 8, 8, 4)).astype(np.float32)
        kern = rng.standard_normal((3, 3, 4, 8)).astype(np.float32)
        spec = ConvSpec(3, 3, 2, Padding.SAME)
        a = tc.conv2d(x, kern, spec)
        b = tc.conv2d(x, kern, spec)
        np.testing.assert_array_equal(a, b)

    def test_dtype_preserved(self):
        x64 = np.random.default_rng(1).standard_normal((1, 4, 4, 2))
        kern = np.ones((1, 1, 2, 2))
        assert tc.conv2d(x64, kern, ConvSpec(1, 1)).dtype == np.float64
        assert tc.conv2d(x64.astype(np.float32), kern.astype(np.float32), ConvSpec(1, 1)).dtype == np.float32


class TestDepthwiseConv2d:
    def test_agrees_with_loop_oracle(self):
        assert kernel_battery.run_depthwise_battery(25, seed=12) <= 1e-5

    def test_channels_do_not_mix(self):
        x = np.zeros((1, 4, 4, 2), dtype=np.float32)
        x[..., 0] = 1.0
        kern = np.ones((3, 3, 2), dtype=np.float32)
        out = tc.depthwise_conv2d(x, kern, ConvSpec(3, 3, 1, Padding.SAME))
        assert np.all(out[..., 1] == 0.0)
        assert out[0, 1, 1, 0] == pytest.approx(9.0)

    def test_kernel_rank_guard(self):
        x = np.zeros((1, 4, 4, 2), dtype=np.float32)
        with pytest.raises(ValueError, match="rank"):
            tc.depthwise_conv2d(x, np.zeros((3, 3, 2, 1), dtype=np.float32), ConvSpec(3, 3))


class TestSeparableConv2d:
    def test_is_exact_composition(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 6, 6, 4)).astype(np.float32)
        dw = rng.standard_normal((3, 3, 4)).astype(np.float32)
        pw = rng.standard_normal((1, 1, 4, 6)).astype(np.float32)
        fused = tc.separable_conv2d(x, dw, pw)
        spatial = tc.depthwise_conv2d(x, dw, ConvSpec(3, 3, 1, Padding.SAME))
        staged = tc.conv2d(spatial, pw, ConvSpec(1, 1, 1, Padding.SAME))
        np.testing.assert_array_equal(fused, staged)

    def test_pointwise_must_be_1x1(self):
        x = np.zeros((1, 6, 6, 4), dtype=np.float32)
        dw = np.zeros((3, 3, 4), dtype=np.float32)
        with pytest.raises(ValueError, match="1x1"):
            tc.separable_conv2d(x, dw, np.zeros((3, 3, 4, 6), dtype=np.float32))


class TestMaxPool2d:
    def test_agrees_with_loop_oracle(self):
        assert kernel_battery.run_max_pool_battery(25, seed=13) <= 1e-5

    def test_same_padding_never_wins(self):
        # Uniformly negative input: if the pad value leaked into the max, some
        # output would differ from the constant.
        x = np.full((1, 5, 5, 2), -5.0, dtype=np.float32)
        out = tc.max_pool2d(x, 3, 2, Padding.SAME)
        np.testing.assert_array_equal(out, np.full(out.shape, -5.0, dtype=np.float32))

    def test_window_validation(self):
        with pytest.raises(ValueError, match="window"):
            tc.max_pool2d(np.zeros((1, 4, 4, 1), dtype=np.float32), 0, 1, Padding.SAME)


class TestDenseAffine:
    def test_agrees_with_loop_oracle(self):
        assert kernel_battery.run_dense_battery(25, seed=14) <= 1e-5

    def test_shape_mismatch_names_dimension(self):
        with pytest.raises(ValueError, match="features"):
            tc.dense_affine(np.zeros((2, 3), dtype=np.float32), np.zeros((4, 5), dtype=np.float32))


class TestBatchNormInfer:
    def test_agrees_with_loop_oracle_rank4_and_rank2(self):
        rng = np.random.default_rng(5)
        gamma = rng.standard_normal(6).astype(np.float32)
        beta = rng.standard_normal(6).astype(np.float32)
        mean = rng.standard_normal(6).astype(np.float32)
        var = rng.random(6).astype(np.float32) + 0.1
        params = tc.BatchNormParams(gamma, beta, mean, var, epsilon=1e-3)
        for shape in [(2, 4, 4, 6), (7, 6)]:
            x = rng.standard_normal(shape).astype(np.float32)
            ref = oracles.batch_norm_infer(x, gamma, beta, mean, var, 1e-3)
            assert rel_err(tc.batch_norm_infer(x, params), ref) <= 1e-5

    def test_identity_parameters(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 3, 4)).astype(np.float32)
        params = tc.BatchNormParams(np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), epsilon=1e-3)
        np.testing.assert_allclose(tc.batch_norm_infer(x, params), x / np.sqrt(1.001), rtol=1e-6)

    def test_epsilon_must_be_positive(self):
        with pytest.raises(ValueError, match="epsilon"):
            tc.BatchNormParams(np.ones(4), np.zeros(4), np.zeros(4), np.ones(4), epsilon=-1e-3)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="length"):
            tc.BatchNormParams(np.ones(4), np.zeros(3), np.zeros(4), np.ones(4))


class TestActivations:
    def test_relu(self):
        x = np.array([-2.0, -0.0, 0.0, 3.5], dtype=np.float32)
        np.testing.assert_array_equal(tc.relu(x), [0.0, 0.0, 0.0, 3.5])

    def test_sigmoid_range_and_midpoint(self):
        x = np.linspace(-30, 30, 301).astype(np.float32)
        s = tc.sigmoid(x)
        assert s.dtype == np.float32
        assert np.all(s >= 0.0) and np.all(s <= 1.0)
        assert np.all(np.diff(s.astype(np.float64)) >= 0.0)
        # Strict openness holds while float32 can still resolve it.
        mid = tc.sigmoid(np.linspace(-15, 15, 61).astype(np.float32))
        assert np.all(mid > 0.0) and np.all(mid < 1.0)
        assert tc.sigmoid(np.array([0.0]))[0] == pytest.approx(0.5)

    def test_sigmoid_extreme_inputs_finite(self):
        s = tc.sigmoid(np.array([-1e4, 1e4], dtype=np.float32))
        assert np.all(np.isfinite(s))
        assert s[0] >= 0.0 and s[1] <= 1.0


class TestGlobalAveragePool:
    def test_agrees_with_loop_oracle(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((3, 7, 7, 5)).astype(np.float32)
        assert rel_err(tc.global_average_pool(x), oracles.global_average_pool(x)) <= 1e-6

    def test_requires_rank4(self):
        with pytest.raises(ValueError, match="rank"):
            tc.global_average_pool(np.zeros((3, 5), dtype=np.float32))


class TestDropout:
    def test_infer_is_identity(self):
        x = np.random.default_rng(0).standard_normal((4, 8)).astype(np.float32)
        np.testing.assert_array_equal(tc.dropout(x, 0.2, Mode.INFER), x)

    def test_rate_zero_is_identity_in_train(self):
        x = np.ones((4, 8), dtype=np.float32)
        np.testing.assert_array_equal(tc.dropout(x, 0.0, Mode.TRAIN, rng=0), x)

    def test_survivors_scaled_exactly(self):
        x = np.ones((100, 100), dtype=np.float32)
        out = tc.dropout(x, 0.2, Mode.TRAIN, rng=42)
        assert set(np.unique(out).tolist()) == {0.0, 1.25}  # 1/(1-0.2) is exact in float32
        drop_frac = float(np.mean(out == 0.0))
        assert abs(drop_frac - 0.2) < 0.02

    def test_seed_reproducibility(self):
        x = np.random.default_rng(1).standard_normal((16, 16)).astype(np.float32)
        a = tc.dropout(x, 0.5, Mode.TRAIN, rng=np.random.default_rng(9))
        b = tc.dropout(x, 0.5, Mode.TRAIN, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_rate_bounds(self):
        x = np.ones((2, 2), dtype=np.float32)
        for bad in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError, match="rate"):
                tc.dropout(x, bad, Mode.TRAIN, rng=0)

    def test_train_without_rng_rejected(self):
        with pytest.raises(ValueError, match="rng"):
            tc.dropout(np.ones((2, 2), dtype=np.float32), 0.5, Mode.TRAIN)


def _random_head_params(rng: np.random.Generator, fin: int, hidden: int, dtype=np.float64) -> tc.HeadParams:
    return tc.HeadParams(
        w1=rng.standard_normal((fin, hidden)).astype(dtype) * 0.3,
        b1=rng.standard_normal(hidden).astype(dtype) * 0.1,
        gamma=(1.0 + 0.2 * rng.standard_normal(hidden)).astype(dtype),
        beta=(0.1 * rng.standard_normal(hidden)).astype(dtype),
        moving_mean=rng.standard_normal(hidden).astype(dtype) * 0.1,
        moving_variance=(0.5 + rng.random(hidden)).astype(dtype),
        w2=rng.standard_normal((hidden, 1)).astype(dtype) * 0.3,
        b2=(0.05 * rng.standard_normal(1)).astype(dtype),
        epsilon=1e-3,
        dropout_rate=0.0,
    )


class TestHeadForward:
    def test_infer_matches_staged_oracle(self):
        rng = np.random.default_rng(21)
        params = _random_head_params(rng, fin=6, hidden=5)
        f = rng.standard_normal((4, 6))
        probs, cache = tc.head_forward(f, params, Mode.INFER)
        assert cache is None
        z1 = oracles.dense_affine(f, params.w1, params.b1)
        a1 = np.maximum(z1, 0.0)
        y = oracles.batch_norm_infer(
            a1, params.gamma, params.beta, params.moving_mean, params.moving_variance, params.epsilon
        )
        z2 = oracles.dense_affine(y, params.w2, params.b2)
        expect = 1.0 / (1.0 + np.exp(-z2[:, 0]))
        np.testing.assert_allclose(probs, expect, rtol=1e-10)

    def test_train_uses_biased_batch_statistics(self):
        rng = np.random.default_rng(22)
        params = _random_head_params(rng, fin=4, hidden=3)
        f = rng.standard_normal((8, 4))
        probs, cache = tc.head_forward(f, params, Mode.TRAIN, rng=np.random.default_rng(0))
        a1 = np.maximum(oracles.dense_affine(f, params.w1, params.b1), 0.0)
        np.testing.assert_allclose(cache.mu, a1.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(cache.var, a1.var(axis=0), rtol=1e-12)  # biased, divisor n
        y = oracles.batch_norm_infer(a1, params.gamma, params.beta, cache.mu, cache.var, params.epsilon)
        z2 = oracles.dense_affine(y, params.w2, params.b2)
        np.testing.assert_allclose(probs, 1.0 / (1.0 + np.exp(-z2[:, 0])), rtol=1e-10)

    def test_probabilities_in_open_unit_interval(self):
        rng = np.random.default_rng(23)
        params = _random_head_params(rng, fin=3, hidden=4, dtype=np.float32)
        f = (rng.standard_normal((64, 3)) * 50).astype(np.float32)
        probs, _ = tc.head_forward(f, params, Mode.INFER)
        assert probs.shape == (64,)
        assert np.all(probs >= 0.0) and np.all(probs <= 1.0)

    def test_single_sample_train_batch_allowed(self):
        rng = np.random.default_rng(24)
        params = _random_head_params(rng, fin=3, hidden=2)
        probs, cache = tc.head_forward(rng.standard_normal((1, 3)), params, Mode.TRAIN, rng=np.random.default_rng(0))
        assert probs.shape == (1,)
        np.testing.assert_allclose(cache.var, 0.0, atol=1e-12)  # variance of one sample


def _fd_grad(loss_fn, arr: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        hi = loss_fn()
        arr[idx] = orig - step
        lo = loss_fn()
        arr[idx] = orig
        grad[idx] = (hi - lo) / (2 * step)
        it.iternext()
    return grad


class TestHeadBackward:
    def _check(self, dropout_rate: float, seed: int) -> None:
        rng = np.random.default_rng(seed)
        params = _random_head_params(rng, fin=5, hidden=4)
        params.dropout_rate = dropout_rate
        f = rng.standard_normal((6, 5))
        target = rng.random(6)

        def loss_for(p_vec: np.ndarray) -> float:
            return float(np.mean((p_vec - target) ** 2))

        def run() -> tuple[float, np.ndarray]:
            probs, cache = tc.head_forward(f, params, Mode.TRAIN, rng=np.random.default_rng(777))
            return loss_for(probs), cache, probs

        loss, cache, probs = run()
        upstream = 2.0 * (probs - target) / probs.size
        grads = tc.head_backward(cache, upstream)

        for name in ("w1", "b1", "gamma", "beta", "w2", "b2"):
            arr = getattr(params, name)
            fd = _fd_grad(lambda: run()[0], arr, step=1e-5)
            got = grads[name]
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(got)), 1e-6)
            assert np.max(np.abs(got - fd) / denom) <= 1e-4, name

    def test_gradcheck_without_dropout(self):
        self._check(dropout_rate=0.0, seed=31)

    def test_gradcheck_with_fixed_dropout_mask(self):
        self._check(dropout_rate=0.2, seed=32)

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(33)
        params = _random_head_params(rng, fin=4, hidden=3)
        f = rng.standard_normal((5, 4))
        _, cache = tc.head_forward(f, params, Mode.TRAIN, rng=np.random.default_rng(1))
        grads = tc.head_backward(cache, np.zeros(5))
        for g in grads.values():
            np.testing.assert_array_equal(g, np.zeros_like(g))

    def test_batch_size_mismatch_rejected(self):
        rng = np.random.default_rng(34)
        params = _random_head_params(rng, fin=4, hidden=3)
        _, cache = tc.head_forward(rng.standard_normal((5, 4)), params, Mode.TRAIN, rng=np.random.default_rng(1))
        with pytest.raises(ValueError, match="batch"):
            tc.head_backward(cache, np.zeros(4))


class TestMovingStats:
    def test_update_formula(self):
        rng = np.random.default_rng(41)
        params = _random_head_params(rng, fin=4, hidden=3)
        before_mean = params.moving_mean.copy()
        before_var = params.moving_variance.copy()
        _, cache = tc.head_forward(rng.standard_normal((8, 4)), params, Mode.TRAIN, rng=np.random.default_rng(2))
        tc.update_moving_stats(params, cache, momentum=0.99)
        np.testing.assert_allclose(params.moving_mean, 0.99 * before_mean + 0.01 * cache.mu, rtol=1e-12)
        np.testing.assert_allclose(params.moving_variance, 0.99 * before_var + 0.01 * cache.var, rtol=1e-12)
