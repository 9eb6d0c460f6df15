"""Randomized agreement battery between the production kernels and the loop oracles.

Shared by the module tests (short run) and the acceptance gate (full run).
"""

from __future__ import annotations

import numpy as np

from ct_diag import tensor_core as tc

from . import oracles


def _rel_err(ours: np.ndarray, ref: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(ref))), 1e-12)
    return float(np.max(np.abs(np.asarray(ours, dtype=np.float64) - ref))) / scale


def _random_geometry(rng: np.random.Generator) -> tuple[int, int, int, int, int, bool]:
    k = int(rng.integers(1, 6))
    stride = int(rng.integers(1, 4))
    same = bool(rng.integers(0, 2))
    lo = 1 if same else k
    h = int(rng.integers(lo, 9))
    w = int(rng.integers(lo, 9))
    n = int(rng.integers(1, 3))
    return n, h, w, k, stride, same


def run_conv_battery(instances: int, seed: int = 101) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, h, w, k, stride, same = _random_geometry(rng)
        cin = int(rng.integers(1, 5))
        cout = int(rng.integers(1, 5))
        x = rng.standard_normal((n, h, w, cin)).astype(np.float32)
        kern = rng.standard_normal((k, k, cin, cout)).astype(np.float32)
        spec = tc.ConvSpec(k, k, stride, tc.Padding.SAME if same else tc.Padding.VALID)
        ours = tc.conv2d(x, kern, spec)
        ref = oracles.conv2d(x, kern, stride, same)
        assert ours.shape == ref.shape
        worst = max(worst, _rel_err(ours, ref))
    return worst


def run_depthwise_battery(instances: int, seed: int = 202) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, h, w, k, stride, same = _random_geometry(rng)
        c = int(rng.integers(1, 5))
        x = rng.standard_normal((n, h, w, c)).astype(np.float32)
        kern = rng.standard_normal((k, k, c)).astype(np.float32)
        spec = tc.ConvSpec(k, k, stride, tc.Padding.SAME if same else tc.Padding.VALID)
        ours = tc.depthwise_conv2d(x, kern, spec)
        ref = oracles.depthwise_conv2d(x, kern, stride, same)
        assert ours.shape == ref.shape
        worst = max(worst, _rel_err(ours, ref))
    return worst


def run_max_pool_battery(instances: int, seed: int = 303) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n, h, w, k, stride, same = _random_geometry(rng)
        c = int(rng.integers(1, 5))
        x = rng.standard_normal((n, h, w, c)).astype(np.float32)
        ours = tc.max_pool2d(x, k, stride, tc.Padding.SAME if same else tc.Padding.VALID)
        ref = oracles.max_pool2d(x, k, stride, same)
        assert ours.shape == ref.shape
        worst = max(worst, _rel_err(ours, ref))
    return worst


def run_dense_battery(instances: int, seed: int = 404) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 9))
        cin = int(rng.integers(1, 33))
        cout = int(rng.integers(1, 17))
        x = rng.standard_normal((n, cin)).astype(np.float32)
        w = rng.standard_normal((cin, cout)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32) if rng.integers(0, 2) else None
        ours = tc.dense_affine(x, w, b)
        ref = oracles.dense_affine(x, w, b)
        assert ours.shape == ref.shape
        worst = max(worst, _rel_err(ours, ref))
    return worst


ALL_BATTERIES = {
    "conv2d": run_conv_battery,
    "depthwise_conv2d": run_depthwise_battery,
    "max_pool2d": run_max_pool_battery,
    "dense_affine": run_dense_battery,
}
