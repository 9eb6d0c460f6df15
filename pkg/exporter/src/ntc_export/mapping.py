"""Correspondence between archive tensors and checkpoint registry names.

Stem convs and separable convs carry stable ``blockN_...`` names in the
archive and map through a pattern table. The four 1x1 projection convs
(and their batch norms) are auto-named by whichever serializer produced
the archive, so they are identified structurally instead: each projection
has a unique output width (128, 256, 728, 1024), which pins its block.

The map must be a bijection onto the manifest's base names - every base
name filled exactly once, every source tensor consumed - and that is
checked on every build, with all violations reported together.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ntc_export.archive import SourceTensor

BN_SUFFIXES = frozenset({"gamma", "beta", "moving_mean", "moving_variance"})

# Output width -> block owning the projection shortcut of that width.
_PROJECTION_BLOCKS = {
    128: "entry/block2",
    256: "entry/block3",
    728: "entry/block4",
    1024: "exit/block13",
}

_STEM = re.compile(r"block1_conv([12])(_bn)?")
_SEPCONV = re.compile(r"block(\d+)_sepconv([123])(_bn)?")


class MappingError(RuntimeError):
    """The archive and the manifest do not describe the same backbone."""


@dataclass(frozen=True)
class NameMap:
    """Ordered source-to-target pairs, keyed both ways for lookups."""

    pairs: tuple[tuple[str, str], ...]

    @property
    def target_of(self) -> dict[str, str]:
        return dict(self.pairs)


def parse_manifest(path: str | Path) -> list[tuple[str, tuple[int, ...]]]:
    """Read ``name dim0xdim1x...`` lines as written by the inspect command."""
    entries: list[tuple[str, tuple[int, ...]]] = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(" ")
        if len(parts) != 2 or not all(d.isdigit() for d in parts[1].split("x")):
            raise ValueError(f"{path}: line {number} is not 'name dims': {line!r}")
        entries.append((parts[0], tuple(int(d) for d in parts[1].split("x"))))
    return entries


def _flow_prefix(block: int) -> str:
    if block <= 4:
        return f"entry/block{block}"
    if block <= 12:
        return f"middle/block{block}"
    return f"exit/block{block}"


def _classify(layer: str) -> tuple[str, str] | None:
    """(target prefix, kind) for pattern-named layers; None for the rest."""
    m = _STEM.fullmatch(layer)
    if m:
        return f"entry/conv{m.group(1)}", "bn" if m.group(2) else "conv"
    m = _SEPCONV.fullmatch(layer)
    if m and 2 <= int(m.group(1)) <= 14:
        prefix = f"{_flow_prefix(int(m.group(1)))}/sepconv{m.group(2)}"
        return prefix, "bn" if m.group(3) else "sepconv"
    return None


_WEIGHT_SLOTS = {
    "conv": {"kernel": "kernel"},
    "sepconv": {"depthwise_kernel": "depthwise", "pointwise_kernel": "pointwise"},
    "bn": {suffix: f"bn/{suffix}" for suffix in BN_SUFFIXES},
}


def match_tensors(
    source: Sequence[SourceTensor], targets: Sequence[tuple[str, tuple[int, ...]]]
) -> tuple[list[tuple[SourceTensor, str]], list[str]]:
    """Pair every source tensor with a target name; collect all violations.

    Returns pairs ordered like ``targets`` plus a list of problems; an empty
    problem list means the pairing is a bijection over the target names.
    """
    target_names = [name for name, _ in targets]
    known = set(target_names)
    claimed: dict[str, SourceTensor] = {}
    problems: list[str] = []
    deferred: dict[str, list[SourceTensor]] = {}

    def claim(tensor: SourceTensor, target: str) -> None:
        if target not in known:
            problems.append(
                f"unmapped source tensor: {tensor.source_id} (no manifest entry {target})"
            )
        elif target in claimed:
            problems.append(
                f"unmapped source tensor: {tensor.source_id} ({target} already filled by "
                f"{claimed[target].source_id})"
            )
        else:
            claimed[target] = tensor

    for tensor in source:
        named = _classify(tensor.layer)
        if named is None:
            deferred.setdefault(tensor.layer, []).append(tensor)
            continue
        prefix, kind = named
        slot = _WEIGHT_SLOTS[kind].get(tensor.weight)
        if slot is None:
            problems.append(f"unmapped source tensor: {tensor.source_id}")
        else:
            claim(tensor, f"{prefix}/{slot}")

    for layer, tensors in deferred.items():
        kinds = {t.weight for t in tensors}
        if kinds == {"kernel"} and len(tensors) == 1 and _projection_width(tensors[0]):
            block = _PROJECTION_BLOCKS[_projection_width(tensors[0])]
            claim(tensors[0], f"{block}/shortcut/kernel")
        elif kinds == BN_SUFFIXES and len(tensors) == 4 and _bn_width(tensors):
            block = _PROJECTION_BLOCKS[_bn_width(tensors)]
            for tensor in tensors:
                claim(tensor, f"{block}/shortcut/bn/{tensor.weight}")
        else:
            problems.extend(f"unmapped source tensor: {t.source_id}" for t in tensors)

    problems.extend(
        f"missing source tensor for {name}" for name in target_names if name not in claimed
    )
    pairs = [(claimed[name], name) for name in target_names if name in claimed]
    return pairs, problems


def _projection_width(tensor: SourceTensor) -> int | None:
    shape = tensor.shape
    if len(shape) == 4 and shape[:2] == (1, 1) and shape[3] in _PROJECTION_BLOCKS:
        return shape[3]
    return None


def _bn_width(tensors: list[SourceTensor]) -> int | None:
    shapes = {t.shape for t in tensors}
    if len(shapes) == 1:
        shape = shapes.pop()
        if len(shape) == 1 and shape[0] in _PROJECTION_BLOCKS:
            return shape[0]
    return None


def build_name_map(
    source: Sequence[SourceTensor], targets: Sequence[tuple[str, tuple[int, ...]]]
) -> NameMap:
    """Total bijective map from source identifiers onto the target names."""
    pairs, problems = match_tensors(source, targets)
    head = [name for name, _ in targets if name.startswith("head/")]
    problems.extend(f"head name in targets: {name}" for name in head)
    if problems:
        raise MappingError("cannot map archive onto manifest:\n" + "\n".join(problems))
    return NameMap(tuple((tensor.source_id, target) for tensor, target in pairs))
