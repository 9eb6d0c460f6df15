"""Slice labeling and patient-level aggregation.

The classifier emits p(class 1) per slice, the probability that the slice
shows no disease. A slice is labeled Non-COVID iff that probability is
strictly above the policy threshold. A volume is then diagnosed by majority
vote over its slice labels, with ties resolving to Non-COVID; the
all-or-nothing rule (COVID if any slice is COVID) and a strict-majority
variant (ties to COVID) are available for sensitivity analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .labels import Label
from .metrics import MetricsReport, build_report, confusion

__all__ = [
    "ThresholdPolicy",
    "Rule",
    "VolumePrediction",
    "DEFAULT_THRESHOLDS",
    "classify_slice",
    "classify_slices",
    "diagnose_majority",
    "diagnose_any",
    "diagnose",
    "diagnose_volume",
    "sweep_thresholds",
]

DEFAULT_THRESHOLDS = (0.15, 0.5, 0.9)


@dataclass(frozen=True)
class ThresholdPolicy:
    """Cutoff on the class-1 probability; comparison is strictly greater-than."""

    threshold: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [0, 1], got {self.threshold}")


class Rule(Enum):
    MAJORITY = "majority"
    ANY = "any"
    MAJORITY_STRICT = "majority-strict"


@dataclass(frozen=True)
class VolumePrediction:
    volume_id: str
    probabilities: tuple[float, ...]
    labels: tuple[Label, ...]
    covid_count: int
    noncovid_count: int
    diagnosis: Label


def classify_slice(p1: float, policy: ThresholdPolicy) -> Label:
    """Label one slice from its class-1 probability."""
    if not 0.0 <= p1 <= 1.0:
        raise ValueError(f"slice probability must be in [0, 1], got {p1}")
    return Label.NON_COVID if p1 > policy.threshold else Label.COVID


def classify_slices(probs: Sequence[float] | np.ndarray, policy: ThresholdPolicy) -> tuple[Label, ...]:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"probabilities must be a vector, got shape {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("slice probabilities must be in [0, 1]")
    return tuple(Label.NON_COVID if above else Label.COVID for above in p > policy.threshold)


def _counts(labels: Sequence[Label]) -> tuple[int, int]:
    if len(labels) == 0:
        raise ValueError("cannot diagnose an empty slice-label list")
    covid = sum(1 for lab in labels if lab is Label.COVID)
    return covid, len(labels) - covid


def diagnose_majority(labels: Sequence[Label]) -> Label:
    """Non-COVID iff Non-COVID slices are at least as numerous (ties -> Non-COVID)."""
    covid, noncovid = _counts(labels)
    return Label.NON_COVID if noncovid >= covid else Label.COVID


def diagnose_any(labels: Sequence[Label]) -> Label:
    """COVID if any single slice is COVID."""
    covid, _ = _counts(labels)
    return Label.COVID if covid > 0 else Label.NON_COVID


def diagnose(labels: Sequence[Label], rule: Rule = Rule.MAJORITY) -> Label:
    if rule is Rule.MAJORITY:
        return diagnose_majority(labels)
    if rule is Rule.ANY:
        return diagnose_any(labels)
    covid, noncovid = _counts(labels)
    return Label.NON_COVID if noncovid > covid else Label.COVID


def diagnose_volume(
    probs: Sequence[float] | np.ndarray,
    policy: ThresholdPolicy,
    rule: Rule = Rule.MAJORITY,
    volume_id: str = "",
) -> VolumePrediction:
    """Label every slice, then aggregate to a patient diagnosis."""
    labels = classify_slices(probs, policy)
    covid, noncovid = _counts(labels)
    return VolumePrediction(
        volume_id=volume_id,
        probabilities=tuple(float(p) for p in np.asarray(probs, dtype=np.float64)),
        labels=labels,
        covid_count=covid,
        noncovid_count=noncovid,
        diagnosis=diagnose(labels, rule),
    )


def sweep_thresholds(
    volumes: Sequence[tuple[Sequence[float] | np.ndarray, Label]],
    thresholds: Sequence[float] | None = None,
    rule: Rule = Rule.MAJORITY,
    z: float = 1.96,
    level: str = "volume",
) -> list[tuple[float, MetricsReport]]:
    """Evaluate (probabilities, truth) pairs at each threshold.

    Args:
        volumes: per-volume slice probabilities with the ground-truth label.
        thresholds: cutoffs to evaluate, kept in the order given; defaults
            to DEFAULT_THRESHOLDS.
        rule: patient-level aggregation rule.
        z: confidence multiplier forwarded to the report.
        level: "volume" scores diagnoses against volume labels; "slice"
            scores slice labels against the volume label copied per slice.

    Returns:
        One (threshold, MetricsReport) pair per threshold.
    """
    if level not in ("volume", "slice"):
        raise ValueError(f"unknown evaluation level {level!r} (expected 'volume' or 'slice')")
    for index, (_, truth) in enumerate(volumes):
        if not isinstance(truth, Label):
            raise ValueError(f"volume at index {index} has no ground-truth label")
    if thresholds is None:
        thresholds = DEFAULT_THRESHOLDS
    results: list[tuple[float, MetricsReport]] = []
    for threshold in thresholds:
        policy = ThresholdPolicy(float(threshold))
        predictions: list[Label] = []
        truths: list[Label] = []
        for probs, truth in volumes:
            if level == "volume":
                predictions.append(diagnose_volume(probs, policy, rule).diagnosis)
                truths.append(truth)
            else:
                slice_labels = classify_slices(probs, policy)
                predictions.extend(slice_labels)
                truths.extend([truth] * len(slice_labels))
        results.append((float(threshold), build_report(confusion(predictions, truths), z=z)))
    return results
