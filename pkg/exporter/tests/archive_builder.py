"""Builders for synthetic source archives in the legacy HDF5 weight layout.

The layer inventory below is written out by hand from the reference
network: stem convs, twelve residual blocks (three downsampling with 1x1
projection shortcuts, eight constant-width, one final downsampling), and
the two widening separable convs at the end. Auto-generated layer names
(``conv2d``, ``batch_normalization``, ...) follow the reference library's
counter scheme. Tests build archives from this table so the converter is
exercised against an independently written description of the source
format, not against its own mapping tables.
"""

from __future__ import annotations

import numpy as np
import h5py
from PIL import Image

BN_SUFFIXES = ("gamma", "beta", "moving_mean", "moving_variance")

# Width of each flow stage: (block number, sepconv output channels).
_DOWN_BLOCKS = (
    (2, 64, 128, "conv2d", "batch_normalization"),
    (3, 128, 256, "conv2d_1", "batch_normalization_1"),
    (4, 256, 728, "conv2d_2", "batch_normalization_2"),
)


def _conv(name: str, shape: tuple[int, ...]):
    return (name, [(f"{name}/kernel:0", shape)])


def _bn(name: str, width: int):
    return (name, [(f"{name}/{s}:0", (width,)) for s in BN_SUFFIXES])


def _sepconv(name: str, cin: int, cout: int):
    return (
        name,
        [
            (f"{name}/depthwise_kernel:0", (3, 3, cin, 1)),
            (f"{name}/pointwise_kernel:0", (1, 1, cin, cout)),
        ],
    )


def _weightless(*names: str):
    return [(name, []) for name in names]


def layer_table() -> list[tuple[str, list[tuple[str, tuple[int, ...]]]]]:
    """Ordered (layer name, [(weight name, shape), ...]) for the full base."""
    layers: list[tuple[str, list[tuple[str, tuple[int, ...]]]]] = []
    layers += _weightless("input_1")
    layers += [_conv("block1_conv1", (3, 3, 3, 32)), _bn("block1_conv1_bn", 32)]
    layers += _weightless("block1_conv1_act")
    layers += [_conv("block1_conv2", (3, 3, 32, 64)), _bn("block1_conv2_bn", 64)]
    layers += _weightless("block1_conv2_act")
    for block, cin, cout, conv_name, bn_name in _DOWN_BLOCKS:
        layers += [
            _sepconv(f"block{block}_sepconv1", cin, cout),
            _bn(f"block{block}_sepconv1_bn", cout),
            _sepconv(f"block{block}_sepconv2", cout, cout),
            _bn(f"block{block}_sepconv2_bn", cout),
            _conv(conv_name, (1, 1, cin, cout)),
            _bn(bn_name, cout),
        ]
        layers += _weightless(f"block{block}_pool")
    for block in range(5, 13):
        for j in (1, 2, 3):
            layers += [
                _sepconv(f"block{block}_sepconv{j}", 728, 728),
                _bn(f"block{block}_sepconv{j}_bn", 728),
            ]
    layers += [
        _sepconv("block13_sepconv1", 728, 728),
        _bn("block13_sepconv1_bn", 728),
        _sepconv("block13_sepconv2", 728, 1024),
        _bn("block13_sepconv2_bn", 1024),
        _conv("conv2d_3", (1, 1, 728, 1024)),
        _bn("batch_normalization_3", 1024),
    ]
    layers += _weightless("block13_pool", "add", "add_1")
    layers += [
        _sepconv("block14_sepconv1", 1024, 1536),
        _bn("block14_sepconv1_bn", 1536),
        _sepconv("block14_sepconv2", 1536, 2048),
        _bn("block14_sepconv2_bn", 2048),
    ]
    layers += _weightless("block14_sepconv2_act")
    return layers


def draw_values(table, seed: int = 0) -> dict[tuple[str, str], np.ndarray]:
    """Random but physically plausible values keyed by (layer, weight name)."""
    rng = np.random.default_rng(seed)
    values: dict[tuple[str, str], np.ndarray] = {}
    for layer, weights in table:
        for wname, shape in weights:
            if wname.endswith("moving_variance:0"):
                arr = np.abs(1.0 + 0.05 * rng.standard_normal(shape)) + 0.1
            elif wname.endswith("gamma:0"):
                arr = 1.0 + 0.05 * rng.standard_normal(shape)
            elif len(shape) == 1:
                arr = 0.02 * rng.standard_normal(shape)
            else:
                fan_in = int(np.prod(shape[:3])) if shape[3] != 1 else shape[0] * shape[1]
                arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            values[(layer, wname)] = arr.astype(np.float32)
    return values


def write_legacy_archive(path, table, values) -> None:
    """Write the weight file layout legacy serializers produce.

    Every layer (weightless ones included) gets a group; ``layer_names``
    and per-group ``weight_names`` attributes are fixed-width byte arrays;
    weight names keep their trailing device suffix and embedded slashes.
    """
    with h5py.File(path, "w") as f:
        f.attrs["layer_names"] = np.array([l.encode() for l, _ in table], dtype="S64")
        f.attrs["backend"] = b"tensorflow"
        for layer, weights in table:
            group = f.create_group(layer)
            group.attrs["weight_names"] = np.array(
                [w.encode() for w, _ in weights], dtype="S96"
            )
            for wname, _ in weights:
                group.create_dataset(wname, data=values[(layer, wname)])


def build_archive(path, seed: int = 0) -> dict[tuple[str, str], np.ndarray]:
    table = layer_table()
    values = draw_values(table, seed=seed)
    write_legacy_archive(path, table, values)
    return values


def write_gray_png(path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="L").save(path)
