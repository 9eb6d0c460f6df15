"""Confusion accounting and the evaluation formulas used throughout.

COVID is the positive class. Two macro-F1 conventions coexist in the wild
and both are reported: ``macro_f1_avgpr`` is the harmonic form built from
class-averaged precision and recall, ``macro_f1_mean`` is the plain mean of
the two per-class F1 scores. Degenerate 0/0 ratios are pinned to 0
everywhere rather than raising.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

from .labels import Label

__all__ = [
    "ConfusionCounts",
    "PRF",
    "MetricsReport",
    "confusion",
    "accuracy",
    "per_class_prf",
    "macro_f1_avgpr",
    "macro_f1_mean",
    "binomial_ci_radius",
    "build_report",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self) -> None:
        for name in ("tp", "fp", "tn", "fn"):
            if getattr(self, name) < 0:
                raise ValueError(f"ConfusionCounts: {name} is negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision_covid: float
    recall_covid: float
    f1_covid: float
    precision_noncovid: float
    recall_noncovid: float
    f1_noncovid: float
    macro_f1_avgpr: float
    macro_f1_mean: float
    ci_radius: float
    n: int
    z: float

    def as_dict(self) -> dict:
        return asdict(self)


def confusion(predictions: Sequence[Label], truths: Sequence[Label]) -> ConfusionCounts:
    """Count agreement between predicted and true labels, COVID positive."""
    if len(predictions) != len(truths):
        raise ValueError(
            f"confusion: length mismatch, {len(predictions)} predictions vs {len(truths)} truths"
        )
    if not predictions:
        raise ValueError("confusion: empty input")
    tp = fp = tn = fn = 0
    for pred, truth in zip(predictions, truths):
        if truth is Label.COVID:
            if pred is Label.COVID:
                tp += 1
            else:
                fn += 1
        else:
            if pred is Label.COVID:
                fp += 1
            else:
                tn += 1
    return ConfusionCounts(tp, fp, tn, fn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def accuracy(c: ConfusionCounts) -> float:
    if c.total == 0:
        raise ValueError("accuracy: total count is zero")
    return (c.tp + c.tn) / c.total


def _f1(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def per_class_prf(c: ConfusionCounts) -> tuple[PRF, PRF]:
    """(COVID, NON_COVID) precision/recall/F1 triples."""
    if c.total == 0:
        raise ValueError("per_class_prf: total count is zero")
    p_cov = _ratio(c.tp, c.tp + c.fp)
    r_cov = _ratio(c.tp, c.tp + c.fn)
    p_non = _ratio(c.tn, c.tn + c.fn)
    r_non = _ratio(c.tn, c.tn + c.fp)
    return PRF(p_cov, r_cov, _f1(p_cov, r_cov)), PRF(p_non, r_non, _f1(p_non, r_non))


def _check_unit(name: str, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")


def macro_f1_avgpr(avg_precision: float, avg_recall: float) -> float:
    """Macro F1 from class-averaged precision and recall: 2*P*R/(P+R)."""
    _check_unit("avg_precision", avg_precision)
    _check_unit("avg_recall", avg_recall)
    return _f1(avg_precision, avg_recall)


def macro_f1_mean(f1_covid: float, f1_noncovid: float) -> float:
    """Macro F1 as the arithmetic mean of the per-class F1 scores."""
    _check_unit("f1_covid", f1_covid)
    _check_unit("f1_noncovid", f1_noncovid)
    return (f1_covid + f1_noncovid) / 2.0


def binomial_ci_radius(score: float, n: int, z: float = 1.96) -> float:
    """Half-width of the binomial-proportion interval: z * sqrt(score*(1-score)/n)."""
    _check_unit("score", score)
    if n < 1:
        raise ValueError(f"binomial_ci_radius: n must be >= 1, got {n}")
    return z * math.sqrt(score * (1.0 - score) / n)


def build_report(c: ConfusionCounts, z: float = 1.96) -> MetricsReport:
    """Assemble the full report; the CI radius is taken on macro_f1_mean."""
    covid, noncovid = per_class_prf(c)
    avg_p = (covid.precision + noncovid.precision) / 2.0
    avg_r = (covid.recall + noncovid.recall) / 2.0
    mean_f1 = macro_f1_mean(covid.f1, noncovid.f1)
    return MetricsReport(
        accuracy=accuracy(c),
        precision_covid=covid.precision,
        recall_covid=covid.recall,
        f1_covid=covid.f1,
        precision_noncovid=noncovid.precision,
        recall_noncovid=noncovid.recall,
        f1_noncovid=noncovid.f1,
        macro_f1_avgpr=macro_f1_avgpr(avg_p, avg_r),
        macro_f1_mean=mean_f1,
        ci_radius=binomial_ci_radius(mean_f1, c.total, z),
        n=c.total,
        z=z,
    )
