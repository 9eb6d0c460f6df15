"""Output parity between an exported checkpoint and the reference network.

The check binds the NTC file into the numpy implementation, loads the
original archive into the reference framework, runs both on one
preprocessed probe image, and compares the final feature maps elementwise.
The verdict uses an absolute budget on the final map; the divergence
search over intermediate block outputs uses a relative criterion instead,
because mid-network activations can sit orders of magnitude above the
final scale and honest float32 reordering noise grows with them.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ct_diag.ingest import load_slice_image, preprocess_slice
from ct_diag.weights_io import bind_weights, load_ntc
from ct_diag.xception import build_modified_xception

from ntc_export.archive import SourceTensor, read_archive

# Residual block outputs in forward order; the last entry is the final
# feature map itself.
TAP_ORDER = (
    "entry/block2",
    "entry/block3",
    "entry/block4",
    *(f"middle/block{b}" for b in range(5, 13)),
    "exit/block13",
    "exit/block14",
)

_RELATIVE_TOLERANCE = 1e-3


class VerifyError(RuntimeError):
    """The archive does not fit the reference network."""


@dataclass(frozen=True)
class VerifyReport:
    status: str  # "ok" | "fail" | "skipped"
    budget: float
    max_abs_delta: float | None
    first_divergence: str | None
    detail: str

    def lines(self) -> list[str]:
        if self.status == "skipped":
            return [f"SKIPPED: {self.detail}"]
        rows = [
            f"status: {self.status.upper()}",
            f"max |delta|: {self.max_abs_delta:.3e} (budget {self.budget:g})",
        ]
        if self.first_divergence is not None:
            rows.append(f"first divergent block: {self.first_divergence}")
        if self.detail:
            rows.append(self.detail)
        return rows


def _import_reference():
    os.environ.setdefault("CUDA_VISIBLE_DEVICES", "-1")
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    import keras

    return keras


def _leaf(weight) -> str:
    path = getattr(weight, "path", None) or weight.name
    return path.split("/")[-1].removesuffix(":0")


def _load_reference_weights(ref, tensors: list[SourceTensor]) -> None:
    """Assign archive tensors to the reference model, layer by layer.

    Serializer vintages differ in how they auto-name projection layers, so
    layers pair by position among weight-bearing layers; shapes and weight
    kinds are still checked tensor by tensor.
    """
    order: list[str] = []
    by_layer: dict[str, dict[str, np.ndarray]] = {}
    for tensor in tensors:
        if tensor.layer not in by_layer:
            by_layer[tensor.layer] = {}
            order.append(tensor.layer)
        by_layer[tensor.layer][tensor.weight] = tensor.values
    ref_layers = [layer for layer in ref.layers if layer.weights]
    if len(ref_layers) != len(order):
        raise VerifyError(
            f"archive holds {len(order)} weighted layers, reference has {len(ref_layers)}"
        )
    for layer, archive_name in zip(ref_layers, order):
        available = by_layer[archive_name]
        arrays = []
        for weight in layer.weights:
            leaf = _leaf(weight)
            values = available.get(leaf)
            if values is None or tuple(weight.shape) != values.shape:
                raise VerifyError(
                    f"archive layer {archive_name} does not fit reference "
                    f"layer {layer.name} (weight {leaf})"
                )
            arrays.append(values)
        layer.set_weights(arrays)


def _first_divergence(keras, ref, x, taps, mine, ref_out) -> str | None:
    adds = [layer for layer in ref.layers if layer.__class__.__name__ == "Add"]
    if len(adds) != len(TAP_ORDER) - 1:
        return None
    tap_model = keras.Model(ref.input, [layer.output for layer in adds])
    ref_taps = [np.asarray(t) for t in tap_model(x, training=False)]
    for name, ref_tap in zip(TAP_ORDER[:-1], ref_taps):
        scale = float(np.max(np.abs(ref_tap))) + 1e-6
        if float(np.max(np.abs(taps[name] - ref_tap))) / scale > _RELATIVE_TOLERANCE:
            return name
    scale = float(np.max(np.abs(ref_out))) + 1e-6
    if float(np.max(np.abs(mine - ref_out))) / scale > _RELATIVE_TOLERANCE:
        return "exit/block14"
    return None


def verify_export(
    source: str | Path,
    ntc: str | Path,
    image: str | Path,
    input_size: int = 224,
    budget: float = 1e-3,
) -> VerifyReport:
    """Compare backbone outputs on one probe image.

    Without the reference framework installed the check cannot run and the
    report says so instead of failing.
    """
    try:
        keras = _import_reference()
    except ImportError as exc:
        return VerifyReport("skipped", budget, None, None,
                            f"reference ecosystem unavailable: {exc}")

    model = build_modified_xception(input_size=input_size)
    bind_weights(model, load_ntc(ntc), allow_missing_head=True)
    if not model.weights_loaded:
        # Backbone-only checkpoint: the head takes no part in base features
        # but the forward pass insists on a fully initialized registry.
        model.init_head(seed=0)
    x = preprocess_slice(load_slice_image(image), size=input_size)[None]
    taps: dict[str, np.ndarray] = {}
    mine = model.base_forward(x, taps=taps)

    ref = keras.applications.Xception(
        weights=None, include_top=False, input_shape=(None, None, 3)
    )
    _load_reference_weights(ref, read_archive(source))
    ref_out = np.asarray(ref(x, training=False))
    if ref_out.shape != mine.shape:
        raise VerifyError(f"feature shapes differ: {mine.shape} vs {ref_out.shape}")

    max_abs_delta = float(np.max(np.abs(mine - ref_out)))
    if max_abs_delta <= budget:
        return VerifyReport("ok", budget, max_abs_delta, None, "")
    first = _first_divergence(keras, ref, x, taps, mine, ref_out)
    return VerifyReport("fail", budget, max_abs_delta, first, "")
