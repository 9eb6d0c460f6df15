"""Tour of the four compute kernels everything else is built from.

Each section runs one kernel on a tensor small enough to reason about by
hand, prints the shapes involved, and cross-checks one output element
against explicit loop arithmetic so the claimed semantics are visible, not
just asserted.

Run: python3 demos/01_kernels_tour.py
"""

import numpy as np

from ct_diag.tensor_core import (
    ConvSpec,
    Padding,
    conv2d,
    dense_affine,
    depthwise_conv2d,
    max_pool2d,
)


def banner(title):
    print()
    print(title)
    print("-" * len(title))


rng = np.random.default_rng(7)

banner("conv2d: NHWC cross-correlation, SAME padding")
x = rng.standard_normal((1, 5, 5, 2)).astype(np.float32)
k = rng.standard_normal((3, 3, 2, 4)).astype(np.float32)
same3 = ConvSpec(3, 3, stride=1, padding=Padding.SAME)
y = conv2d(x, k, same3)
print(f"input {x.shape} * kernel {k.shape} -> output {y.shape}")
# One output element recomputed with explicit loops over the receptive field.
manual = 0.0
for di in range(3):
    for dj in range(3):
        for c in range(2):
            manual += x[0, 1 + di, 1 + dj, c] * k[di, dj, c, 0]
print(f"y[0,2,2,0] = {y[0, 2, 2, 0]:+.6f}   loop arithmetic = {manual:+.6f}")

banner("depthwise_conv2d: one filter per channel, no channel mixing")
dk = rng.standard_normal((3, 3, 2)).astype(np.float32)
yd = depthwise_conv2d(x, dk, same3)
print(f"input {x.shape} * kernel {dk.shape} -> output {yd.shape} (channels preserved)")
x_only_c1 = x.copy()
x_only_c1[..., 0] = 0.0
yd_c1 = depthwise_conv2d(x_only_c1, dk, same3)
print(f"zeroing channel 0 leaves channel 1 output unchanged: "
      f"{bool(np.array_equal(yd[..., 1], yd_c1[..., 1]))}")

banner("max_pool2d: 3x3 window, stride 2, SAME padding")
yp = max_pool2d(x, window=3, stride=2, padding=Padding.SAME)
print(f"input {x.shape} -> output {yp.shape}")
window = x[0, 1:4, 1:4, 0]
print(f"y[0,1,1,0] = {yp[0, 1, 1, 0]:+.6f}   max of its 3x3 window = {window.max():+.6f}")

banner("dense_affine: x @ W + b")
xf = rng.standard_normal((2, 6)).astype(np.float32)
w = rng.standard_normal((6, 3)).astype(np.float32)
b = rng.standard_normal(3).astype(np.float32)
yf = dense_affine(xf, w, b)
print(f"input {xf.shape} x weights {w.shape} + bias {b.shape} -> {yf.shape}")
print(f"y[1,2] = {yf[1, 2]:+.6f}   dot product = {float(xf[1] @ w[:, 2] + b[2]):+.6f}")

banner("strides downsample, padding decides edge handling")
for stride in (1, 2):
    out = conv2d(x, k, ConvSpec(3, 3, stride=stride, padding=Padding.SAME))
    print(f"stride {stride}, same:  {x.shape[1]}x{x.shape[2]} -> {out.shape[1]}x{out.shape[2]}")
out = conv2d(x, k, ConvSpec(3, 3, stride=2, padding=Padding.VALID))
print(f"stride 2, valid: 5x5 -> {out.shape[1]}x{out.shape[2]} (edges dropped)")
