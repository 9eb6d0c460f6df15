"""NTC: a minimal named-tensor checkpoint format.

One NTC file holds an ordered set of named float32 tensors::

    "NTC1" | version u32 | entry count u32 | table size u32 | table crc32 u32
    entry table: per entry
        name length u32 | name (UTF-8) | dtype u32 (0 = float32)
        rank u32 | dims u32 * rank | absolute payload offset u64
    padding to a 4-byte boundary, then payloads, contiguous in table order

All integers are little-endian. Payloads carry raw little-endian float32 with
no gaps, so the file size is fully determined by the table. The crc32 guards
the table: any corrupted byte there fails loudly instead of silently
misassigning tensors. Payload bytes are deliberately unprotected; a flipped
bit there perturbs exactly one tensor and is caught only if it produces a
non-finite value.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "NtcError",
    "NtcBindError",
    "save_ntc",
    "load_ntc",
    "bind_weights",
    "write_name_manifest",
]

_MAGIC = b"NTC1"
_VERSION = 1
_DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIII")  # magic, version, count, table size, table crc32


class NtcError(Exception):
    """A malformed, unreadable, or unwritable checkpoint."""


class NtcBindError(NtcError):
    """Checkpoint contents do not match the model registry."""


def _align4(n: int) -> int:
    return n + (-n) % 4


def save_ntc(entries: Iterable[tuple[str, np.ndarray]], path: str | Path) -> None:
    """Write (name, float32 array) pairs to ``path``.

    The output is a pure function of the entries: identical registries
    produce identical files. The file is written to a temporary sibling and
    renamed into place so a crash cannot leave a half-written checkpoint.
    """
    prepared: list[tuple[str, np.ndarray]] = []
    seen: set[str] = set()
    for name, values in entries:
        if not isinstance(name, str) or not name:
            raise NtcError(f"tensor name must be a non-empty string, got {name!r}")
        if name in seen:
            raise NtcError(f"duplicate tensor name: {name}")
        seen.add(name)
        if values is None:
            raise NtcError(f"tensor {name} has no values")
        arr = np.ascontiguousarray(values, dtype="<f4")
        if not np.isfinite(arr).all():
            raise NtcError(f"tensor {name} contains non-finite values")
        prepared.append((name, arr))

    table = bytearray()
    blobs: list[bytes] = []
    sizes = [arr.nbytes for _, arr in prepared]
    header_and_table = _HEADER.size + sum(
        4 + len(name.encode("utf-8")) + 4 + 4 + 4 * arr.ndim + 8 for name, arr in prepared
    )
    offset = _align4(header_and_table)
    for (name, arr), nbytes in zip(prepared, sizes):
        encoded = name.encode("utf-8")
        table += struct.pack("<I", len(encoded)) + encoded
        table += struct.pack("<II", _DTYPE_F32, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<Q", offset)
        blobs.append(arr.tobytes())
        offset += nbytes

    header = _HEADER.pack(_MAGIC, _VERSION, len(prepared), len(table), zlib.crc32(table))
    pad = b"\x00" * (_align4(_HEADER.size + len(table)) - _HEADER.size - len(table))

    path = Path(path)
    try:
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(header)
                fh.write(table)
                fh.write(pad)
                for blob in blobs:
                    fh.write(blob)
            os.replace(tmp_name, path)
        except BaseException:
            os.unlink(tmp_name)
            raise
    except OSError as exc:
        raise NtcError(f"cannot write checkpoint {path}: {exc}") from exc


def load_ntc(path: str | Path) -> list[tuple[str, tuple[int, ...], np.ndarray]]:
    """Read a checkpoint, returning (name, shape, values) in file order.

    Every structural invariant is validated before anything is returned, so
    a corrupt file never yields a partial result. Values come back as
    writable float32 arrays.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise NtcError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(data) < _HEADER.size:
        raise NtcError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, count, table_size, crc = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise NtcError(f"{path}: bad magic {magic!r}, not an NTC checkpoint")
    if version != _VERSION:
        raise NtcError(f"{path}: unsupported version {version} (expected {_VERSION})")
    if _HEADER.size + table_size > len(data):
        raise NtcError(f"{path}: truncated entry table")
    table = data[_HEADER.size : _HEADER.size + table_size]
    if zlib.crc32(table) != crc:
        raise NtcError(f"{path}: entry table checksum mismatch (corrupted file)")

    entries: list[tuple[str, tuple[int, ...], int]] = []
    names: set[str] = set()
    pos = 0
    expected_offset = _align4(_HEADER.size + table_size)
    for index in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", table, pos)
            pos += 4
            name = table[pos : pos + name_len].decode("utf-8")
            pos += name_len
            dtype, rank = struct.unpack_from("<II", table, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}I", table, pos)
            pos += 4 * rank
            (offset,) = struct.unpack_from("<Q", table, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError) as exc:
            raise NtcError(f"{path}: malformed table entry {index}: {exc}") from exc
        if not name or name in names:
            raise NtcError(f"{path}: empty or duplicate tensor name at entry {index}")
        names.add(name)
        if dtype != _DTYPE_F32:
            raise NtcError(f"{path}: tensor {name} has unsupported dtype code {dtype}")
        if offset != expected_offset:
            raise NtcError(
                f"{path}: tensor {name} at offset {offset}, expected {expected_offset}"
            )
        expected_offset += 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        entries.append((name, tuple(int(d) for d in dims), offset))
    if pos != table_size:
        raise NtcError(f"{path}: entry table has {table_size - pos} unparsed bytes")
    if expected_offset != len(data):
        raise NtcError(
            f"{path}: payload region ends at {expected_offset}, file has {len(data)} bytes"
        )

    out: list[tuple[str, tuple[int, ...], np.ndarray]] = []
    for name, shape, offset in entries:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        values = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        if not np.isfinite(values).all():
            raise NtcError(f"{path}: tensor {name} contains non-finite values")
        out.append((name, shape, values))
    return out


def bind_weights(
    model,
    entries: Sequence[tuple[str, tuple[int, ...], np.ndarray]],
    allow_missing_head: bool = False,
) -> None:
    """Assign loaded tensors into ``model.registry`` by name.

    The checkpoint must cover the registry exactly: any missing name, extra
    name, or shape mismatch aborts the bind with every offender listed, and
    the model is left untouched. ``allow_missing_head`` waives coverage of
    the ``head/`` tensors so that backbone-only checkpoints (pretrained
    bases exported without a classifier) can bind; the head is then left
    for the caller to initialize.
    """
    registry = model.registry
    by_name: dict[str, np.ndarray] = {}
    provided: set[str] = set()
    problems: list[str] = []
    for name, shape, values in entries:
        if name in provided:
            problems.append(f"duplicate: {name}")
            continue
        provided.add(name)
        if name not in registry:
            problems.append(f"extra: {name} {shape}")
        elif tuple(shape) != registry[name].shape:
            problems.append(f"shape mismatch: {name} is {shape}, model wants {registry[name].shape}")
        else:
            by_name[name] = values
    problems.extend(
        f"missing: {name}"
        for name in registry
        if name not in provided and not (allow_missing_head and name.startswith("head/"))
    )
    if problems:
        shown = "; ".join(problems[:8])
        more = f" (+{len(problems) - 8} more)" if len(problems) > 8 else ""
        raise NtcBindError(f"checkpoint does not match model: {shown}{more}")
    for name, values in by_name.items():
        arr = np.ascontiguousarray(values, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NtcBindError(f"tensor {name} contains non-finite values")
        registry[name].values = arr


def write_name_manifest(items: Iterable[tuple[str, tuple[int, ...]]], path: str | Path) -> None:
    """Write one ``name dim0xdim1x...`` line per tensor."""
    lines = [f"{name} {'x'.join(str(d) for d in shape)}" for name, shape in items]
    Path(path).write_text("\n".join(lines) + "\n")
