"""The two diagnosis classes and their on-disk directory names."""

from __future__ import annotations

from enum import Enum

__all__ = ["Label", "COVID_DIR", "NON_COVID_DIR", "label_from_dirname"]

COVID_DIR = "covid"
NON_COVID_DIR = "non-covid"


class Label(Enum):
    """COVID is the positive class throughout the package."""

    COVID = "COVID"
    NON_COVID = "Non-COVID"


def label_from_dirname(name: str) -> Label:
    if name == COVID_DIR:
        return Label.COVID
    if name == NON_COVID_DIR:
        return Label.NON_COVID
    raise ValueError(f"unknown class directory {name!r} (expected {COVID_DIR!r} or {NON_COVID_DIR!r})")
