"""Numpy kernels for channels-last CNN inference and the trainable head.

Every operation works on plain ``np.ndarray`` values with layout NHWC for
rank-4 tensors. Convolutions are cross-correlations (no kernel flip), SAME
padding follows the convention where any odd padding pixel lands on the
bottom/right edge, and all kernels preserve the input dtype so the same code
path can run in float64 for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "Padding",
    "Mode",
    "ConvSpec",
    "BatchNormParams",
    "HeadParams",
    "HeadCache",
    "out_size",
    "pad_amounts",
    "conv2d",
    "depthwise_conv2d",
    "separable_conv2d",
    "max_pool2d",
    "batch_norm_infer",
    "relu",
    "sigmoid",
    "dropout",
    "global_average_pool",
    "dense_affine",
    "head_forward",
    "head_backward",
    "update_moving_stats",
]


class Padding(Enum):
    SAME = "same"
    VALID = "valid"


class Mode(Enum):
    TRAIN = "train"
    INFER = "infer"


@dataclass(frozen=True)
class ConvSpec:
    """Static geometry of a convolution or pooling window."""

    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: Padding = Padding.VALID

    def __post_init__(self) -> None:
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError(f"ConvSpec: kernel size must be >= 1, got {self.kernel_h}x{self.kernel_w}")
        if self.stride < 1:
            raise ValueError(f"ConvSpec: stride must be >= 1, got {self.stride}")
        if not isinstance(self.padding, Padding):
            raise ValueError(f"ConvSpec: padding must be a Padding value, got {self.padding!r}")


def out_size(in_size: int, kernel: int, stride: int, padding: Padding) -> int:
    """Output extent along one spatial axis.

    SAME: ceil(in / stride). VALID: floor((in - kernel) / stride) + 1, which
    requires the input to be at least as large as the kernel.
    """
    if in_size < 1:
        raise ValueError(f"out_size: input extent must be >= 1, got {in_size}")
    if padding is Padding.SAME:
        return -(-in_size // stride)
    if in_size < kernel:
        raise ValueError(
            f"out_size: input extent {in_size} is smaller than kernel {kernel} with VALID padding"
        )
    return (in_size - kernel) // stride + 1


def pad_amounts(in_size: int, kernel: int, stride: int, padding: Padding) -> tuple[int, int]:
    """Padding (before, after) along one axis; the odd pixel goes after."""
    if padding is Padding.VALID:
        return 0, 0
    out = out_size(in_size, kernel, stride, padding)
    total = max((out - 1) * stride + kernel - in_size, 0)
    before = total // 2
    return before, total - before


def _check_rank4(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ValueError(f"{name}: input must have rank 4 (N, H, W, C), got rank {x.ndim}")


def _padded_geometry(
    name: str, x: np.ndarray, kh: int, kw: int, spec: ConvSpec, fill: float
) -> tuple[np.ndarray, int, int]:
    if (kh, kw) != (spec.kernel_h, spec.kernel_w):
        raise ValueError(
            f"{name}: kernel is {kh}x{kw} but spec declares {spec.kernel_h}x{spec.kernel_w}"
        )
    _, h, w, _ = x.shape
    oh = out_size(h, kh, spec.stride, spec.padding)
    ow = out_size(w, kw, spec.stride, spec.padding)
    ph = pad_amounts(h, kh, spec.stride, spec.padding)
    pw = pad_amounts(w, kw, spec.stride, spec.padding)
    if any(ph) or any(pw):
        x = np.pad(x, ((0, 0), ph, pw, (0, 0)), constant_values=fill)
    return x, oh, ow


def conv2d(
    x: np.ndarray, kernel: np.ndarray, spec: ConvSpec, bias: np.ndarray | None = None
) -> np.ndarray:
    """2-D convolution, NHWC input against a (kh, kw, Cin, Cout) kernel.

    Implemented as one matmul per kernel tap over strided input slices, which
    keeps the arithmetic inside BLAS while staying bit-deterministic for a
    fixed input.
    """
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    _check_rank4("conv2d", x)
    if kernel.ndim != 4:
        raise ValueError(f"conv2d: kernel must have rank 4 (kh, kw, Cin, Cout), got rank {kernel.ndim}")
    kh, kw, kcin, cout = kernel.shape
    n, _, _, cin = x.shape
    if cin != kcin:
        raise ValueError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    xp, oh, ow = _padded_geometry("conv2d", x, kh, kw, spec, 0.0)
    s = spec.stride
    acc = np.zeros((n * oh * ow, cout), dtype=np.result_type(x.dtype, kernel.dtype))
    for i in range(kh):
        hi = i + (oh - 1) * s + 1
        for j in range(kw):
            wj = j + (ow - 1) * s + 1
            tap = xp[:, i:hi:s, j:wj:s, :]
            acc += tap.reshape(-1, cin) @ kernel[i, j]
    out = acc.reshape(n, oh, ow, cout)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (cout,):
            raise ValueError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")
        out = out + bias
    return out


def depthwise_conv2d(x: np.ndarray, kernel: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Per-channel 2-D convolution with a (kh, kw, C) kernel, channel multiplier 1."""
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    _check_rank4("depthwise_conv2d", x)
    if kernel.ndim != 3:
        raise ValueError(
            f"depthwise_conv2d: kernel must have rank 3 (kh, kw, C), got rank {kernel.ndim}"
        )
    kh, kw, kc = kernel.shape
    n, _, _, c = x.shape
    if c != kc:
        raise ValueError(f"depthwise_conv2d: input has {c} channels but kernel expects {kc}")
    xp, oh, ow = _padded_geometry("depthwise_conv2d", x, kh, kw, spec, 0.0)
    s = spec.stride
    acc = np.zeros((n, oh, ow, c), dtype=np.result_type(x.dtype, kernel.dtype))
    for i in range(kh):
        hi = i + (oh - 1) * s + 1
        for j in range(kw):
            wj = j + (ow - 1) * s + 1
            acc += xp[:, i:hi:s, j:wj:s, :] * kernel[i, j]
    return acc


def separable_conv2d(
    x: np.ndarray,
    depthwise_kernel: np.ndarray,
    pointwise_kernel: np.ndarray,
    stride: int = 1,
    padding: Padding = Padding.SAME,
) -> np.ndarray:
    """Depthwise convolution followed by a 1x1 pointwise convolution, no bias."""
    pointwise_kernel = np.asarray(pointwise_kernel)
    if pointwise_kernel.ndim != 4 or pointwise_kernel.shape[:2] != (1, 1):
        raise ValueError(
            f"separable_conv2d: pointwise kernel must be 1x1, got shape {pointwise_kernel.shape}"
        )
    dk = np.asarray(depthwise_kernel)
    spatial = depthwise_conv2d(x, dk, ConvSpec(dk.shape[0], dk.shape[1], stride, padding))
    return conv2d(spatial, pointwise_kernel, ConvSpec(1, 1, 1, Padding.SAME))


def max_pool2d(x: np.ndarray, window: int, stride: int, padding: Padding) -> np.ndarray:
    """Max pooling; SAME padding uses -inf so padded positions never win."""
    x = np.asarray(x)
    _check_rank4("max_pool2d", x)
    if window < 1:
        raise ValueError(f"max_pool2d: window must be >= 1, got {window}")
    spec = ConvSpec(window, window, stride, padding)
    xp, oh, ow = _padded_geometry("max_pool2d", x, window, window, spec, -np.inf)
    n, _, _, c = x.shape
    acc = np.full((n, oh, ow, c), -np.inf, dtype=x.dtype)
    for i in range(window):
        hi = i + (oh - 1) * stride + 1
        for j in range(window):
            wj = j + (ow - 1) * stride + 1
            np.maximum(acc, xp[:, i:hi:stride, j:wj:stride, :], out=acc)
    return acc


@dataclass
class BatchNormParams:
    """Inference-mode batch normalization parameters for one channel axis."""

    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_variance: np.ndarray
    epsilon: float = 1e-3

    def __post_init__(self) -> None:
        lengths = {
            np.asarray(self.gamma).shape,
            np.asarray(self.beta).shape,
            np.asarray(self.moving_mean).shape,
            np.asarray(self.moving_variance).shape,
        }
        if len(lengths) != 1 or len(next(iter(lengths))) != 1:
            raise ValueError(f"BatchNormParams: parameter vectors must share one length, got {lengths}")
        if self.epsilon <= 0:
            raise ValueError(f"BatchNormParams: epsilon must be > 0, got {self.epsilon}")
        if np.any(np.asarray(self.moving_variance) < 0):
            raise ValueError("BatchNormParams: moving variance must be non-negative")


def batch_norm_infer(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """Normalize the trailing channel axis with stored statistics."""
    x = np.asarray(x)
    c = params.gamma.shape[0]
    if x.shape[-1] != c:
        raise ValueError(f"batch_norm_infer: input has {x.shape[-1]} channels, parameters have {c}")
    inv = 1.0 / np.sqrt(params.moving_variance + params.epsilon)
    scale = params.gamma * inv
    shift = params.beta - params.moving_mean * scale
    return x * scale + shift


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x), 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument cannot overflow, so split on sign.
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def global_average_pool(x: np.ndarray) -> np.ndarray:
    """Mean over both spatial axes: (N, H, W, C) -> (N, C)."""
    x = np.asarray(x)
    _check_rank4("global_average_pool", x)
    return x.mean(axis=(1, 2))


def dense_affine(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(
            f"dense_affine: expected rank-2 input and weight, got ranks {x.ndim} and {weight.ndim}"
        )
    if x.shape[1] != weight.shape[0]:
        raise ValueError(
            f"dense_affine: input features {x.shape[1]} do not match weight rows {weight.shape[0]}"
        )
    out = x @ weight
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"dense_affine: bias shape {bias.shape} does not match {weight.shape[1]} units")
        out = out + bias
    return out


def _as_generator(rng: int | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def dropout(
    x: np.ndarray, rate: float, mode: Mode, rng: int | np.random.Generator | None = None
) -> np.ndarray:
    """Inverted dropout: zero with probability ``rate``, scale survivors by 1/(1-rate).

    INFER mode (and rate 0) is the identity. TRAIN mode requires an explicit
    rng so the mask is reproducible.
    """
    x = np.asarray(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if mode is Mode.INFER or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: TRAIN mode with rate > 0 requires an rng")
    keep = _as_generator(rng).random(x.shape) >= rate
    scale = x.dtype.type(1.0 / (1.0 - rate))
    return np.where(keep, x * scale, x.dtype.type(0.0))


@dataclass
class HeadParams:
    """Weights of the classification head: dense -> relu -> bn -> dropout -> dense -> sigmoid."""

    w1: np.ndarray
    b1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_variance: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    epsilon: float = 1e-3
    dropout_rate: float = 0.2

    def __post_init__(self) -> None:
        hidden = self.w1.shape[1]
        for name in ("b1", "gamma", "beta", "moving_mean", "moving_variance"):
            if getattr(self, name).shape != (hidden,):
                raise ValueError(f"HeadParams: {name} must have shape ({hidden},)")
        if self.w2.shape[0] != hidden:
            raise ValueError(f"HeadParams: w2 rows {self.w2.shape[0]} do not match hidden width {hidden}")
        if self.b2.shape != (self.w2.shape[1],):
            raise ValueError(f"HeadParams: b2 shape {self.b2.shape} does not match w2 columns")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"HeadParams: dropout rate must be in [0, 1), got {self.dropout_rate}")
        if self.epsilon <= 0:
            raise ValueError(f"HeadParams: epsilon must be > 0, got {self.epsilon}")

    def trainable(self) -> dict[str, np.ndarray]:
        """The arrays an optimizer may update, keyed by gradient name."""
        return {
            "w1": self.w1,
            "b1": self.b1,
            "gamma": self.gamma,
            "beta": self.beta,
            "w2": self.w2,
            "b2": self.b2,
        }


@dataclass
class HeadCache:
    """Intermediates captured by a TRAIN-mode forward, consumed by head_backward."""

    features: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    inv: np.ndarray
    xhat: np.ndarray
    drop: np.ndarray | None
    d: np.ndarray
    p: np.ndarray
    gamma: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)


def head_forward(
    features: np.ndarray,
    params: HeadParams,
    mode: Mode,
    rng: int | np.random.Generator | None = None,
) -> tuple[np.ndarray, HeadCache | None]:
    """Run the head on pooled features.

    Args:
        features: (N, Cin) feature matrix.
        params: head weights; TRAIN mode normalizes with biased batch
            statistics, INFER mode with the stored moving statistics.
        mode: TRAIN additionally applies dropout and returns a cache.
        rng: mask source, required in TRAIN mode when dropout_rate > 0.

    Returns:
        (probabilities with shape (N,), cache) where cache is None in INFER mode.
    """
    f = np.asarray(features)
    if f.ndim != 2:
        raise ValueError(f"head_forward: features must have rank 2, got rank {f.ndim}")
    if f.shape[1] != params.w1.shape[0]:
        raise ValueError(
            f"head_forward: features have width {f.shape[1]}, dense weights expect {params.w1.shape[0]}"
        )
    z1 = f @ params.w1 + params.b1
    a1 = np.maximum(z1, 0)
    if mode is Mode.TRAIN:
        mu = a1.mean(axis=0)
        var = a1.var(axis=0)
    else:
        mu = params.moving_mean
        var = params.moving_variance
    inv = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (a1 - mu) * inv
    y = params.gamma * xhat + params.beta
    drop = None
    if mode is Mode.TRAIN and params.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("head_forward: TRAIN mode with dropout requires an rng")
        keep = _as_generator(rng).random(y.shape) >= params.dropout_rate
        drop = np.where(
            keep, y.dtype.type(1.0 / (1.0 - params.dropout_rate)), y.dtype.type(0.0)
        )
    d = y * drop if drop is not None else y
    z2 = d @ params.w2 + params.b2
    p = sigmoid(z2[:, 0])
    if mode is Mode.INFER:
        return p, None
    cache = HeadCache(
        features=f, z1=z1, a1=a1, mu=mu, var=var, inv=inv, xhat=xhat,
        drop=drop, d=d, p=p, gamma=params.gamma, w2=params.w2,
    )
    return p, cache


def head_backward(cache: HeadCache, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. the trainable head parameters.

    ``upstream`` is dLoss/dprobabilities with shape (N,). The batch-norm
    backward treats the batch statistics as functions of the input, matching
    the TRAIN-mode forward. Returns arrays keyed like HeadParams.trainable().
    """
    g = np.asarray(upstream)
    n = cache.p.shape[0]
    if g.shape != (n,):
        raise ValueError(f"head_backward: upstream shape {g.shape} does not match forward batch ({n},)")
    dz2 = (g * cache.p * (1.0 - cache.p)).reshape(-1, 1)
    dw2 = cache.d.T @ dz2
    db2 = dz2.sum(axis=0)
    dd = dz2 @ cache.w2.T
    dy = dd * cache.drop if cache.drop is not None else dd
    dgamma = (dy * cache.xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * cache.gamma
    xc = cache.a1 - cache.mu
    dvar = (dxhat * xc).sum(axis=0) * (-0.5) * cache.inv**3
    dmu = -dxhat.sum(axis=0) * cache.inv + dvar * (-2.0) * xc.mean(axis=0)
    da1 = dxhat * cache.inv + dvar * (2.0 / n) * xc + dmu * (1.0 / n)
    dz1 = da1 * (cache.z1 > 0)
    dw1 = cache.features.T @ dz1
    db1 = dz1.sum(axis=0)
    return {"w1": dw1, "b1": db1, "gamma": dgamma, "beta": dbeta, "w2": dw2, "b2": db2}


def update_moving_stats(params: HeadParams, cache: HeadCache, momentum: float = 0.99) -> None:
    """Blend batch statistics into the moving statistics, in place."""
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"update_moving_stats: momentum must be in [0, 1), got {momentum}")
    params.moving_mean *= momentum
    params.moving_mean += (1.0 - momentum) * cache.mu
    params.moving_variance *= momentum
    params.moving_variance += (1.0 - momentum) * cache.var
