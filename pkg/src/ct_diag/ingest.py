"""Dataset discovery, slice decoding, and model-ready batch assembly.

Directory contract: a labeled dataset root holds ``covid/`` and/or
``non-covid/`` class directories, each containing one directory per CT
volume, each of those containing the slice images. A prediction root skips
the class level: every direct subdirectory is one unlabeled volume. Slice
files are ordered lexicographically by filename; that order is what batch
provenance and prediction CSVs refer to.

Preprocessing follows the backbone's input convention: decode to 8-bit
grayscale, bilinear-resize to the model's square input, map pixel p to
p/127.5 - 1, and replicate the single channel three times.
"""

from __future__ import annotations

import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image, UnidentifiedImageError

from .labels import COVID_DIR, NON_COVID_DIR, Label, label_from_dirname

__all__ = [
    "IngestError",
    "CTVolume",
    "DatasetManifest",
    "SliceBatch",
    "EXPECTED_SLICE_RANGE",
    "scan_dataset",
    "load_slice_image",
    "resize_bilinear",
    "preprocess_slice",
    "batch_iter",
]

logger = logging.getLogger(__name__)

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

# Volumes in the source corpus hold 50 to 700 slices; anything outside that
# range is suspicious but not fatal.
EXPECTED_SLICE_RANGE = (50, 700)

_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


class IngestError(Exception):
    """Unreadable dataset layout or undecodable slice data."""


@dataclass(frozen=True)
class CTVolume:
    volume_id: str
    slice_paths: tuple[Path, ...]
    label: Label | None

    def __len__(self) -> int:
        return len(self.slice_paths)


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    volumes: tuple[CTVolume, ...]

    @property
    def n_covid(self) -> int:
        return sum(1 for v in self.volumes if v.label is Label.COVID)

    @property
    def n_noncovid(self) -> int:
        return sum(1 for v in self.volumes if v.label is Label.NON_COVID)

    @property
    def n_slices(self) -> int:
        return sum(len(v) for v in self.volumes)

    @property
    def labeled(self) -> bool:
        return all(v.label is not None for v in self.volumes)


@dataclass(frozen=True)
class SliceBatch:
    tensor: np.ndarray
    provenance: tuple[tuple[str, int], ...]


def _volume_from_dir(directory: Path, label: Label | None) -> CTVolume | None:
    paths = tuple(
        sorted(
            p for p in directory.iterdir()
            if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
        )
    )
    if not paths:
        logger.warning("skipping volume %s: no slice images found", directory)
        return None
    lo, hi = EXPECTED_SLICE_RANGE
    if not lo <= len(paths) <= hi:
        logger.warning(
            "volume %s has %d slices, outside the expected %d-%d range",
            directory, len(paths), lo, hi,
        )
    return CTVolume(volume_id=directory.name, slice_paths=paths, label=label)


def scan_dataset(root: str | Path, require_labels: bool = False) -> DatasetManifest:
    """Build a manifest from a dataset root.

    The layout is detected from the presence of the class directories; with
    ``require_labels`` a prediction-style (unlabeled) root is rejected.
    Scanning is deterministic: class directories in fixed order, volumes and
    slices lexicographic.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestError(f"dataset root {root} is not a readable directory")
    class_dirs = [d for d in (COVID_DIR, NON_COVID_DIR) if (root / d).is_dir()]
    volumes: list[CTVolume] = []
    if class_dirs:
        for class_dir in class_dirs:
            label = label_from_dirname(class_dir)
            for vol_dir in sorted(p for p in (root / class_dir).iterdir() if p.is_dir()):
                volume = _volume_from_dir(vol_dir, label)
                if volume is not None:
                    volumes.append(volume)
    else:
        if require_labels:
            raise IngestError(
                f"dataset root {root} has no {COVID_DIR}/ or {NON_COVID_DIR}/ class "
                "directories; labeled data is required here"
            )
        for vol_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            volume = _volume_from_dir(vol_dir, None)
            if volume is not None:
                volumes.append(volume)
    counts = Counter(v.volume_id for v in volumes)
    duplicates = sorted(vid for vid, n in counts.items() if n > 1)
    if duplicates:
        # Volume ids key slice provenance, training labels, and prediction
        # rows, so a name shared between class directories would silently
        # attribute one volume's slices to the other.
        shown = ", ".join(duplicates[:8])
        more = f" (and {len(duplicates) - 8} more)" if len(duplicates) > 8 else ""
        raise IngestError(
            f"dataset root {root} reuses volume directory names across class "
            f"directories: {shown}{more}; volume names must be unique"
        )
    return DatasetManifest(name=root.name, volumes=tuple(volumes))


def load_slice_image(path: str | Path) -> np.ndarray:
    """Decode one slice file to an (H, W) uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                logger.warning("slice %s is %s, converting to grayscale via luma weights", path, img.mode)
                img = img.convert("L")
            return np.asarray(img, dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestError(f"cannot decode slice image {path}: {exc}") from exc


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resample with edge clamping.

    Interpolation uses the a + t*(b - a) form, so constant images resize to
    exactly the same constant.
    """
    img = np.asarray(img, dtype=np.float32)
    in_h, in_w = img.shape
    src_y = (np.arange(out_h, dtype=np.float32) + 0.5) * (in_h / out_h) - 0.5
    src_x = (np.arange(out_w, dtype=np.float32) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(src_y)
    x0 = np.floor(src_x)
    ty = (src_y - y0).astype(np.float32)[:, None]
    tx = (src_x - x0).astype(np.float32)[None, :]
    y0c = np.clip(y0.astype(np.int64), 0, in_h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, in_h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, in_w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, in_w - 1)
    p00 = img[np.ix_(y0c, x0c)]
    p01 = img[np.ix_(y0c, x1c)]
    p10 = img[np.ix_(y1c, x0c)]
    p11 = img[np.ix_(y1c, x1c)]
    top = p00 + tx * (p01 - p00)
    bottom = p10 + tx * (p11 - p10)
    return top + ty * (bottom - top)


def preprocess_slice(image: np.ndarray, size: int = 224) -> np.ndarray:
    """8-bit grayscale image of any extent -> (size, size, 3) float32 in [-1, 1]."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[-1] == 3:
        logger.warning("slice array is 3-channel, converting to grayscale via luma weights")
        img = np.rint(img.astype(np.float64) @ _LUMA_WEIGHTS).astype(np.uint8)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected 8-bit pixels, got dtype {img.dtype}")
    resized = resize_bilinear(img, size, size)
    normalized = resized / np.float32(127.5) - np.float32(1.0)
    return np.repeat(normalized[:, :, None], 3, axis=2)


def _iter_slices(source: DatasetManifest | CTVolume) -> Iterator[tuple[str, int, Path]]:
    volumes: Iterable[CTVolume]
    volumes = source.volumes if isinstance(source, DatasetManifest) else (source,)
    for volume in volumes:
        for index, path in enumerate(volume.slice_paths):
            yield volume.volume_id, index, path


def _load_and_preprocess(path: Path, size: int) -> np.ndarray:
    return preprocess_slice(load_slice_image(path), size=size)


def batch_iter(
    source: DatasetManifest | CTVolume,
    batch_size: int = 128,
    size: int = 224,
    workers: int = 1,
) -> Iterator[SliceBatch]:
    """Stream preprocessed batches in deterministic (volume, slice) order.

    ``workers`` bounds parallel decoding; the emitted order is identical for
    any worker count. The final batch may be short.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    entries = list(_iter_slices(source))
    for start in range(0, len(entries), batch_size):
        chunk = entries[start : start + batch_size]
        paths = [path for _, _, path in chunk]
        if workers == 1:
            tensors = [_load_and_preprocess(p, size) for p in paths]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                tensors = list(pool.map(_load_and_preprocess, paths, [size] * len(paths)))
        yield SliceBatch(
            tensor=np.stack(tensors).astype(np.float32, copy=False),
            provenance=tuple((vid, idx) for vid, idx, _ in chunk),
        )


def default_workers() -> int:
    """Worker count from CT_DIAG_WORKERS, else 1."""
    raw = os.environ.get("CT_DIAG_WORKERS", "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError as exc:
        raise ValueError(f"CT_DIAG_WORKERS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ValueError(f"CT_DIAG_WORKERS must be >= 1, got {value}")
    return value
