"""Archive-to-NTC conversion.

Axis-order differences are settled here: conv and pointwise kernels are
already stored kh,kw,Cin,Cout and pass through unchanged; depthwise
kernels arrive with a trailing depth-multiplier axis of 1 and are
flattened to kh,kw,C. Output tensors follow manifest order, so identical
inputs always produce byte-identical files.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ct_diag.weights_io import save_ntc

from ntc_export.archive import read_archive
from ntc_export.mapping import match_tensors, parse_manifest


class ExportError(RuntimeError):
    """Conversion aborted; the message lists every offender found."""


@dataclass(frozen=True)
class ExportReport:
    """What was written: one (name, shape, crc32) row per tensor."""

    entries: tuple[tuple[str, tuple[int, ...], str], ...]
    tensor_count: int
    scalar_count: int
    out_path: str

    def lines(self) -> list[str]:
        return [
            f"{name} {'x'.join(str(d) for d in shape)} crc32={crc}"
            for name, shape, crc in self.entries
        ]

    def summary(self) -> str:
        return f"wrote {self.tensor_count} tensors ({self.scalar_count} values) to {self.out_path}"


def export(source: str | Path, manifest: str | Path, out: str | Path) -> ExportReport:
    """Convert a pretrained archive into an NTC checkpoint of the backbone.

    Head names in the manifest are not exported; the trainer draws a fresh
    head. Any missing source tensor, unmapped name, or shape mismatch
    aborts the export with all offenders listed and no file written.
    """
    tensors = read_archive(source)
    targets = [(n, s) for n, s in parse_manifest(manifest) if not n.startswith("head/")]
    pairs, problems = match_tensors(tensors, targets)

    shapes = dict(targets)
    converted: list[tuple[str, np.ndarray]] = []
    for tensor, target in pairs:
        values = tensor.values
        if tensor.weight == "depthwise_kernel" and values.ndim == 4 and values.shape[3] == 1:
            values = values[:, :, :, 0]
        if values.shape != shapes[target]:
            problems.append(
                f"shape mismatch: {tensor.source_id} {values.shape} "
                f"cannot fill {target} {shapes[target]}"
            )
            continue
        converted.append((target, np.ascontiguousarray(values, dtype=np.float32)))

    if problems:
        raise ExportError("export aborted:\n" + "\n".join(problems))

    save_ntc(converted, out)
    rows = tuple(
        (name, values.shape, f"{zlib.crc32(values.tobytes()):08x}") for name, values in converted
    )
    scalar_count = sum(values.size for _, values in converted)
    return ExportReport(rows, len(converted), scalar_count, str(out))
