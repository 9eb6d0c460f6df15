"""Reader for legacy HDF5 weight archives.

The layout this handles is the one pretrained backbone archives are
distributed in: an ordered ``layer_names`` attribute at the root (or on a
``model_weights`` group for whole-model files), one group per layer, each
listing its tensors in a ``weight_names`` attribute. Weight names keep
their device suffix (``kernel:0``) and may contain slashes, which HDF5
resolves as nested groups.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import h5py
import numpy as np


class ArchiveError(RuntimeError):
    """The source file is not a readable weight archive."""


@dataclass(frozen=True)
class SourceTensor:
    """One tensor read from the archive.

    ``weight`` is the leaf identifier with the device suffix stripped:
    kernel, depthwise_kernel, pointwise_kernel, gamma, beta, moving_mean,
    or moving_variance.
    """

    layer: str
    weight: str
    shape: tuple[int, ...]
    values: np.ndarray

    @property
    def source_id(self) -> str:
        return f"{self.layer}/{self.weight}"


def _attr_names(group, key: str) -> list[str] | None:
    # Serializers split long attribute lists into key0, key1, ... chunks
    # once they exceed the HDF5 object-header limit.
    if key in group.attrs:
        raw = list(group.attrs[key])
    else:
        raw = []
        index = 0
        while f"{key}{index}" in group.attrs:
            raw.extend(group.attrs[f"{key}{index}"])
            index += 1
        if index == 0:
            return None
    return [name.decode("utf-8") if isinstance(name, bytes) else str(name) for name in raw]


def read_archive(path: str | Path) -> list[SourceTensor]:
    """All weights in archive order, cast to float32."""
    path = Path(path)
    try:
        handle = h5py.File(path, "r")
    except OSError as exc:
        raise ArchiveError(f"cannot open weight archive {path}: {exc}") from exc
    with handle:
        root = handle
        layer_names = _attr_names(root, "layer_names")
        if layer_names is None and "model_weights" in handle:
            root = handle["model_weights"]
            layer_names = _attr_names(root, "layer_names")
        if layer_names is None:
            raise ArchiveError(f"{path}: no layer_names attribute; not a weight archive")
        tensors: list[SourceTensor] = []
        for layer in layer_names:
            if layer not in root:
                raise ArchiveError(f"{path}: listed layer {layer} has no group")
            group = root[layer]
            for wname in _attr_names(group, "weight_names") or []:
                node = group.get(wname)
                if not isinstance(node, h5py.Dataset):
                    raise ArchiveError(f"{path}: listed weight {layer}/{wname} has no dataset")
                values = np.asarray(node[...], dtype=np.float32)
                leaf = wname.split("/")[-1].removesuffix(":0")
                tensors.append(SourceTensor(layer, leaf, tuple(values.shape), values))
        return tensors
