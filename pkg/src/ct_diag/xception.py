"""Modified Xception: a 36-conv-layer backbone with a small binary head.

The backbone is the familiar three-flow layout (entry, middle, exit) built
from depthwise-separable convolutions with residual connections, truncated
before its original classifier. On top sits the replacement head:
global average pooling, a 128-unit dense layer with ReLU, batch
normalization, dropout, and a single sigmoid unit that scores a CT slice.
Counted the usual way (separable convolutions count once, the four 1x1
residual projections do not count), the backbone has 36 convolutional
layers.

Parameters live in an ordered registry of named tensors so that checkpoints,
freezing, and optimizer updates all agree on one naming scheme. Shapes are
fixed at construction; values arrive later via ``init_weights`` or a
checkpoint binder.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .tensor_core import (
    BatchNormParams,
    ConvSpec,
    HeadParams,
    Mode,
    Padding,
    batch_norm_infer,
    conv2d,
    global_average_pool,
    head_forward,
    max_pool2d,
    out_size,
    relu,
    separable_conv2d,
    update_moving_stats,
)

__all__ = [
    "HeadSpec",
    "ParamTensor",
    "ModifiedXception",
    "WeightsNotLoadedError",
    "build_modified_xception",
]

_BN_SUFFIXES = ("gamma", "beta", "moving_mean", "moving_variance")
_BN_MOMENTUM = 0.99


class WeightsNotLoadedError(RuntimeError):
    """Raised when inference is attempted before every tensor has values."""


@dataclass(frozen=True)
class HeadSpec:
    """Width and regularization of the classification head."""

    hidden_units: int = 128
    dropout_rate: float = 0.2
    bn_epsilon: float = 1e-3

    def __post_init__(self) -> None:
        if self.hidden_units < 1:
            raise ValueError(f"HeadSpec: hidden_units must be >= 1, got {self.hidden_units}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"HeadSpec: dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.bn_epsilon <= 0:
            raise ValueError(f"HeadSpec: bn_epsilon must be > 0, got {self.bn_epsilon}")


@dataclass
class ParamTensor:
    """One named weight tensor; ``values`` is None until loaded or initialized."""

    name: str
    shape: tuple[int, ...]
    trainable: bool
    values: np.ndarray | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ModifiedXception:
    """The slice classifier. See the module docstring for the layout."""

    def __init__(self, head: HeadSpec | None = None, input_size: int = 224):
        self.head_spec = head or HeadSpec()
        self.input_size = int(input_size)
        self.registry: dict[str, ParamTensor] = {}
        self._layers: list[dict] = []
        self._frozen = False
        self._middle_blocks = [f"middle/block{k}" for k in range(5, 13)]
        self._declare_architecture()
        # Fails early for inputs too small to survive the stem and the four
        # stride-2 stages.
        self.base_output_shape

    # ---------------------------------------------------------------- declare

    def _declare(self, name: str, shape: tuple[int, ...], trainable: bool) -> None:
        if name in self.registry:
            raise ValueError(f"duplicate parameter name: {name}")
        self.registry[name] = ParamTensor(name, shape, trainable)

    def _declare_bn(self, prefix: str, channels: int, trainable: bool) -> None:
        self._declare(f"{prefix}/gamma", (channels,), trainable)
        self._declare(f"{prefix}/beta", (channels,), trainable)
        self._declare(f"{prefix}/moving_mean", (channels,), False)
        self._declare(f"{prefix}/moving_variance", (channels,), False)

    def _declare_conv(self, name: str, cin: int, cout: int, stride: int, kind: str) -> None:
        k = 1 if kind == "shortcut" else 3
        self._declare(f"{name}/kernel", (k, k, cin, cout), True)
        self._declare_bn(f"{name}/bn", cout, True)
        self._layers.append({"name": name, "kind": kind, "cin": cin, "cout": cout, "stride": stride})

    def _declare_sepconv(self, name: str, cin: int, cout: int) -> None:
        self._declare(f"{name}/depthwise", (3, 3, cin), True)
        self._declare(f"{name}/pointwise", (1, 1, cin, cout), True)
        self._declare_bn(f"{name}/bn", cout, True)
        self._layers.append({"name": name, "kind": "sepconv", "cin": cin, "cout": cout, "stride": 1})

    def _declare_architecture(self) -> None:
        self._declare_conv("entry/conv1", 3, 32, 2, "conv")
        self._declare_conv("entry/conv2", 32, 64, 1, "conv")
        width = 64
        for block, out in (("entry/block2", 128), ("entry/block3", 256), ("entry/block4", 728)):
            self._declare_sepconv(f"{block}/sepconv1", width, out)
            self._declare_sepconv(f"{block}/sepconv2", out, out)
            self._declare_conv(f"{block}/shortcut", width, out, 2, "shortcut")
            width = out
        for block in self._middle_blocks:
            for i in (1, 2, 3):
                self._declare_sepconv(f"{block}/sepconv{i}", 728, 728)
        self._declare_sepconv("exit/block13/sepconv1", 728, 728)
        self._declare_sepconv("exit/block13/sepconv2", 728, 1024)
        self._declare_conv("exit/block13/shortcut", 728, 1024, 2, "shortcut")
        self._declare_sepconv("exit/block14/sepconv1", 1024, 1536)
        self._declare_sepconv("exit/block14/sepconv2", 1536, 2048)

        hidden = self.head_spec.hidden_units
        self._declare("head/dense1/kernel", (2048, hidden), True)
        self._declare("head/dense1/bias", (hidden,), True)
        self._declare_bn("head/bn", hidden, True)
        self._declare("head/dense2/kernel", (hidden, 1), True)
        self._declare("head/dense2/bias", (1,), True)

    # ------------------------------------------------------------- inspection

    def layer_summary(self) -> list[dict]:
        """Conv-style layers in forward order (shortcut projections included)."""
        return [dict(row) for row in self._layers]

    @property
    def conv_layer_count(self) -> int:
        return sum(1 for row in self._layers if row["kind"] in ("conv", "sepconv"))

    @property
    def base_output_shape(self) -> tuple[int, int, int]:
        s = self.input_size
        s = out_size(s, 3, 2, Padding.VALID)   # entry/conv1
        s = out_size(s, 3, 1, Padding.VALID)   # entry/conv2
        for _ in range(4):                     # blocks 2, 3, 4 and 13
            s = out_size(s, 3, 2, Padding.SAME)
        return (s, s, 2048)

    def count_params(self) -> tuple[int, int]:
        """(total scalar count, currently-trainable scalar count)."""
        total = sum(pt.size for pt in self.registry.values())
        trainable = sum(pt.size for pt in self.registry.values() if pt.trainable)
        return total, trainable

    @property
    def weights_loaded(self) -> bool:
        return all(pt.values is not None for pt in self.registry.values())

    @property
    def is_frozen(self) -> bool:
        return self._frozen

    def base_digest(self) -> str:
        """SHA-256 over every non-head tensor, in registry order."""
        h = hashlib.sha256()
        for pt in self.registry.values():
            if pt.name.startswith("head/"):
                continue
            h.update(pt.name.encode())
            h.update(b"\x00" if pt.values is None else np.ascontiguousarray(pt.values).tobytes())
        return h.hexdigest()

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """(name, values) pairs for checkpointing; requires loaded weights."""
        self._require_loaded()
        return [(pt.name, pt.values) for pt in self.registry.values()]

    # ------------------------------------------------------------------ state

    def freeze_base(self) -> "ModifiedXception":
        """Mark every non-head tensor as non-trainable."""
        for pt in self.registry.values():
            if not pt.name.startswith("head/"):
                pt.trainable = False
        self._frozen = True
        return self

    def init_weights(self, seed: int = 0) -> "ModifiedXception":
        """Deterministically initialize every tensor from one seed.

        Conv kernels draw from He-uniform over their fan-in; the head dense
        kernels draw from a normal(0, 0.05) truncated at two standard
        deviations; biases, means and betas start at zero, gammas and
        variances at one.
        """
        rng = np.random.default_rng(seed)
        for pt in self.registry.values():
            pt.values = _initial_values(pt, rng)
        return self

    def init_head(self, seed: int = 0) -> "ModifiedXception":
        """Reinitialize only the ``head/`` tensors; the backbone keeps its
        current values (or stays unset). Used when a pretrained backbone is
        bound from a checkpoint that carries no classifier."""
        rng = np.random.default_rng(seed)
        for pt in self.registry.values():
            if pt.name.startswith("head/"):
                pt.values = _initial_values(pt, rng)
        return self

    def _require_loaded(self) -> None:
        missing = [pt.name for pt in self.registry.values() if pt.values is None]
        if missing:
            raise WeightsNotLoadedError(
                f"model has {len(missing)} unset tensors (first: {missing[0]}); "
                "call init_weights() or bind a checkpoint first"
            )

    # ---------------------------------------------------------------- forward

    def _values(self, name: str) -> np.ndarray:
        return self.registry[name].values

    def _bn_params(self, prefix: str, epsilon: float = 1e-3) -> BatchNormParams:
        return BatchNormParams(
            *(self._values(f"{prefix}/{suffix}") for suffix in _BN_SUFFIXES), epsilon=epsilon
        )

    def _conv_bn_relu(self, name: str, x: np.ndarray, stride: int) -> np.ndarray:
        kernel = self._values(f"{name}/kernel")
        spec = ConvSpec(kernel.shape[0], kernel.shape[1], stride, Padding.VALID)
        x = conv2d(x, kernel, spec)
        return relu(batch_norm_infer(x, self._bn_params(f"{name}/bn")))

    def _sepconv_bn(self, name: str, x: np.ndarray) -> np.ndarray:
        x = separable_conv2d(x, self._values(f"{name}/depthwise"), self._values(f"{name}/pointwise"))
        return batch_norm_infer(x, self._bn_params(f"{name}/bn"))

    def _shortcut(self, name: str, x: np.ndarray) -> np.ndarray:
        kernel = self._values(f"{name}/kernel")
        x = conv2d(x, kernel, ConvSpec(1, 1, 2, Padding.SAME))
        return batch_norm_infer(x, self._bn_params(f"{name}/bn"))

    def _down_block(self, name: str, x: np.ndarray, leading_relu: bool) -> np.ndarray:
        shortcut = self._shortcut(f"{name}/shortcut", x)
        y = relu(x) if leading_relu else x
        y = relu(self._sepconv_bn(f"{name}/sepconv1", y))
        y = self._sepconv_bn(f"{name}/sepconv2", y)
        y = max_pool2d(y, 3, 2, Padding.SAME)
        return y + shortcut

    def _middle_block(self, name: str, x: np.ndarray) -> np.ndarray:
        y = x
        for i in (1, 2, 3):
            y = self._sepconv_bn(f"{name}/sepconv{i}", relu(y))
        return x + y

    def base_forward(self, x: np.ndarray, taps: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Backbone features before pooling: (N, S, S, 3) -> (N, h, w, 2048).

        When ``taps`` is a dict it receives the output of every residual
        block, keyed by block name.
        """

        def tap(name: str, value: np.ndarray) -> np.ndarray:
            if taps is not None:
                taps[name] = value
            return value

        x = self._conv_bn_relu("entry/conv1", x, stride=2)
        x = self._conv_bn_relu("entry/conv2", x, stride=1)
        # The first residual block has no leading ReLU: its input comes
        # straight out of the stem activation.
        for block, leading in (("entry/block2", False), ("entry/block3", True), ("entry/block4", True)):
            x = tap(block, self._down_block(block, x, leading))
        for block in self._middle_blocks:
            x = tap(block, self._middle_block(block, x))
        x = tap("exit/block13", self._down_block("exit/block13", x, leading_relu=True))
        x = relu(self._sepconv_bn("exit/block14/sepconv1", x))
        x = relu(self._sepconv_bn("exit/block14/sepconv2", x))
        return tap("exit/block14", x)

    def head_params(self) -> HeadParams:
        """Views of the head tensors; mutating them mutates the registry."""
        return HeadParams(
            w1=self._values("head/dense1/kernel"),
            b1=self._values("head/dense1/bias"),
            gamma=self._values("head/bn/gamma"),
            beta=self._values("head/bn/beta"),
            moving_mean=self._values("head/bn/moving_mean"),
            moving_variance=self._values("head/bn/moving_variance"),
            w2=self._values("head/dense2/kernel"),
            b2=self._values("head/dense2/bias"),
            epsilon=self.head_spec.bn_epsilon,
            dropout_rate=self.head_spec.dropout_rate,
        )

    def extract_features(self, batch: np.ndarray) -> np.ndarray:
        """Pooled backbone features for a preprocessed batch: (N, 2048)."""
        return global_average_pool(self.base_forward(self._check_batch(batch)))

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        self._require_loaded()
        b = np.asarray(batch)
        s = self.input_size
        if b.ndim != 4 or b.shape[1:] != (s, s, 3):
            raise ValueError(
                f"expected a batch shaped (N, {s}x{s}x3), got {b.shape}"
            )
        if not np.isfinite(b).all():
            raise ValueError("input batch contains non-finite values")
        if b.dtype != np.float32:
            b = b.astype(np.float32)
        return b

    def forward(
        self,
        batch: np.ndarray,
        mode: Mode = Mode.INFER,
        rng: int | np.random.Generator | None = None,
    ) -> np.ndarray:
        """Slice probabilities for a preprocessed batch.

        Returns p(class 1) per slice, shape (N,). TRAIN mode uses batch
        statistics and dropout in the head (the backbone always runs in
        inference mode) and folds the batch statistics into the head's
        moving statistics.
        """
        feats = self.extract_features(batch)
        params = self.head_params()
        probs, cache = head_forward(feats, params, mode, rng)
        if mode is Mode.TRAIN:
            update_moving_stats(params, cache, momentum=_BN_MOMENTUM)
        return probs


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def _initial_values(pt: ParamTensor, rng: np.random.Generator) -> np.ndarray:
    leaf = pt.name.rsplit("/", 1)[-1]
    if leaf in ("gamma", "moving_variance"):
        return np.ones(pt.shape, dtype=np.float32)
    if leaf in ("beta", "moving_mean", "bias"):
        return np.zeros(pt.shape, dtype=np.float32)
    if pt.name.startswith("head/"):
        return _truncated_normal(rng, pt.shape, 0.05).astype(np.float32)
    if leaf == "depthwise":
        fan_in = pt.shape[0] * pt.shape[1]
    else:
        fan_in = int(np.prod(pt.shape[:-1]))
    limit = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-limit, limit, size=pt.shape).astype(np.float32)


def build_modified_xception(
    head: HeadSpec | None = None, input_size: int = 224
) -> ModifiedXception:
    """Construct the classifier with declared (but unset) parameters."""
    return ModifiedXception(head=head, input_size=input_size)
