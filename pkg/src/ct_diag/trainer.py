"""Head-only training: BCE loss, Adam, and a reduce-on-plateau schedule.

The backbone stays frozen, so each slice is pushed through it exactly once
to produce a pooled feature vector; all epochs then run on the cached
feature matrix. `fit_head` is the feature-level loop, `train_head` the
manifest-level wrapper that performs the extraction.

Determinism contract: given the same config (including seed) and the same
inputs, the history and the final head weights are bitwise reproducible.
One generator seeded from the config drives both the epoch shuffles and the
dropout masks, and parameter updates happen strictly in batch order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import metrics
from .diagnosis import ThresholdPolicy, classify_slices
from .ingest import CTVolume, DatasetManifest, batch_iter
from .labels import Label
from .tensor_core import Mode, head_backward, head_forward, update_moving_stats
from .xception import ModifiedXception

__all__ = [
    "TrainConfig",
    "PlateauState",
    "AdamState",
    "EpochStats",
    "TrainingError",
    "bce_loss",
    "adam_step",
    "plateau_update",
    "fit_head",
    "train_head",
    "extract_labeled_features",
    "write_history_csv",
    "history_summary",
    "HISTORY_FIELDS",
]

_CLIP = 1e-7

# Training metrics are slice-level at the midpoint cutoff; patient-level
# aggregation happens downstream of training.
_TRAIN_POLICY = ThresholdPolicy(0.5)


class TrainingError(RuntimeError):
    """Training aborted; the message carries the epoch/batch coordinates."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 13
    plateau_patience: int = 2
    plateau_factor: float = 0.1
    min_lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    seed: int = 0

    def __post_init__(self) -> None:
        positive = (
            "learning_rate", "batch_size", "epochs", "plateau_patience",
            "beta1", "beta2", "epsilon",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"TrainConfig: {name} must be positive")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(
                f"TrainConfig: plateau_factor must be in (0, 1), got {self.plateau_factor}"
            )
        if self.min_lr < 0:
            raise ValueError(f"TrainConfig: min_lr must be >= 0, got {self.min_lr}")


@dataclass(frozen=True)
class PlateauState:
    best: float
    wait: int
    lr: float

    @classmethod
    def initial(cls, config: TrainConfig) -> "PlateauState":
        return cls(best=math.inf, wait=0, lr=config.learning_rate)


def plateau_update(state: PlateauState, epoch_val_loss: float, config: TrainConfig) -> PlateauState:
    """Advance the schedule by one epoch of validation loss.

    Only a strict decrease counts as improvement; after `plateau_patience`
    non-improving epochs the rate is multiplied by `plateau_factor` (floored
    at `min_lr`) and the wait counter restarts.
    """
    if not math.isfinite(epoch_val_loss):
        raise ValueError(f"plateau_update: loss must be finite, got {epoch_val_loss}")
    if epoch_val_loss < state.best:
        return PlateauState(best=epoch_val_loss, wait=0, lr=state.lr)
    wait = state.wait + 1
    if wait >= config.plateau_patience:
        return PlateauState(
            best=state.best,
            wait=0,
            lr=max(state.lr * config.plateau_factor, config.min_lr),
        )
    return PlateauState(best=state.best, wait=wait, lr=state.lr)


class AdamState:
    """First/second-moment accumulators keyed like the parameter dict."""

    def __init__(self, m: dict[str, np.ndarray], v: dict[str, np.ndarray]):
        self.m = m
        self.v = v
        self.t = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros_like(p, dtype=np.float64) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-7,
) -> None:
    """One bias-corrected Adam update, applied to the parameter arrays in place."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ValueError(
            f"adam_step: key sets differ, params={sorted(params)} grads={sorted(grads)}"
        )
    for name, p in params.items():
        if np.shape(grads[name]) != p.shape:
            raise ValueError(
                f"adam_step: gradient shape {np.shape(grads[name])} does not match "
                f"parameter {name} with shape {p.shape}"
            )
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(p.dtype, copy=False)


def bce_loss(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to p.

    Probabilities are clipped to [1e-7, 1-1e-7] before the logs; where the
    clip is active the gradient is zero, matching the clipped forward.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1:
        raise ValueError(f"bce_loss: length mismatch, p{p.shape} vs y{y.shape}")
    if p.size == 0:
        raise ValueError("bce_loss: empty batch")
    c = np.clip(p, _CLIP, 1.0 - _CLIP)
    loss = float(np.mean(-(y * np.log(c) + (1.0 - y) * np.log1p(-c))))
    grad = (c - y) / (c * (1.0 - c) * p.size)
    grad[p != c] = 0.0
    return loss, grad


class EpochStats(NamedTuple):
    epoch: int
    train_loss: float
    val_loss: float
    train_acc: float
    val_acc: float
    val_precision: float
    val_recall: float
    lr: float


HISTORY_FIELDS = EpochStats._fields


def _check_targets(name: str, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.size and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError(f"{name} labels must be 0 or 1")
    return y


def _labels_from_targets(y: np.ndarray) -> list[Label]:
    return [Label.NON_COVID if t == 1.0 else Label.COVID for t in y]


def _slice_metrics(probs: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """(accuracy, covid precision, covid recall) at the 0.5 cutoff."""
    predictions = classify_slices(probs, _TRAIN_POLICY)
    counts = metrics.confusion(predictions, _labels_from_targets(y))
    covid, _ = metrics.per_class_prf(counts)
    return metrics.accuracy(counts), covid.precision, covid.recall


def fit_head(
    model: ModifiedXception,
    train_features: np.ndarray,
    train_labels: np.ndarray,
    val_features: np.ndarray,
    val_labels: np.ndarray,
    config: TrainConfig,
) -> list[EpochStats]:
    """Train the classification head on precomputed pooled features.

    The model's head arrays are updated in place. Returns one EpochStats row
    per epoch; the `lr` column is the rate in force during that epoch, with
    plateau cuts taking effect from the next one.
    """
    if not model.is_frozen:
        raise ValueError("fit_head: the backbone must be frozen before head training")
    xt = np.asarray(train_features)
    xv = np.asarray(val_features)
    yt = _check_targets("train", train_labels)
    yv = _check_targets("validation", val_labels)
    if xt.ndim != 2 or xt.shape[0] != yt.size:
        raise ValueError(
            f"fit_head: train features {xt.shape} do not match {yt.size} labels"
        )
    if xv.ndim != 2 or xv.shape[0] != yv.size:
        raise ValueError(
            f"fit_head: validation features {xv.shape} do not match {yv.size} labels"
        )
    if yt.size == 0 or yv.size == 0:
        raise ValueError("fit_head: train and validation sets must be non-empty")

    params = model.head_params()
    trainable = params.trainable()
    adam = AdamState.for_params(trainable)
    schedule = PlateauState.initial(config)
    rng = np.random.default_rng(config.seed)
    history: list[EpochStats] = []

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(yt.size)
        loss_sum = 0.0
        train_predictions: list[np.ndarray] = []
        train_targets: list[np.ndarray] = []
        for batch_index, start in enumerate(range(0, yt.size, config.batch_size), start=1):
            idx = order[start : start + config.batch_size]
            probs, cache = head_forward(xt[idx], params, Mode.TRAIN, rng=rng)
            loss, dp = bce_loss(probs, yt[idx])
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite training loss ({loss}) at epoch {epoch}, batch {batch_index}"
                )
            grads = head_backward(cache, dp)
            adam_step(
                trainable, grads, adam, lr=schedule.lr,
                beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon,
            )
            update_moving_stats(params, cache)
            loss_sum += loss * idx.size
            train_predictions.append(probs)
            train_targets.append(yt[idx])

        train_loss = loss_sum / yt.size
        train_acc, _, _ = _slice_metrics(
            np.concatenate(train_predictions), np.concatenate(train_targets)
        )
        val_probs, _ = head_forward(xv, params, Mode.INFER)
        val_loss, _ = bce_loss(val_probs, yv)
        if not math.isfinite(val_loss):
            raise TrainingError(
                f"non-finite validation loss ({val_loss}) at epoch {epoch}"
            )
        val_acc, val_precision, val_recall = _slice_metrics(val_probs, yv)
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                train_acc=train_acc,
                val_acc=val_acc,
                val_precision=val_precision,
                val_recall=val_recall,
                lr=schedule.lr,
            )
        )
        schedule = plateau_update(schedule, val_loss, config)
    return history


def extract_labeled_features(
    model: ModifiedXception,
    manifest: DatasetManifest | CTVolume,
    batch_size: int = 128,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Run every slice through the frozen backbone once.

    Returns (features, targets) where targets are 1.0 for non-COVID volumes
    and 0.0 for COVID ones.
    """
    volumes = manifest.volumes if isinstance(manifest, DatasetManifest) else (manifest,)
    by_id: dict[str, Label] = {}
    for volume in volumes:
        if volume.label is None:
            raise ValueError(
                f"volume {volume.volume_id} has no label; training data must be labeled"
            )
        known = by_id.get(volume.volume_id)
        if known is not None and known is not volume.label:
            # Batch provenance refers to volumes by id, so a shared id with
            # conflicting labels would mislabel every slice of one volume.
            raise ValueError(
                f"volume id {volume.volume_id!r} appears with both labels; "
                "ids must be unique to attribute slices"
            )
        by_id[volume.volume_id] = volume.label
    chunks: list[np.ndarray] = []
    targets: list[float] = []
    for batch in batch_iter(manifest, batch_size=batch_size, size=model.input_size, workers=workers):
        chunks.append(model.extract_features(batch.tensor))
        targets.extend(
            1.0 if by_id[vid] is Label.NON_COVID else 0.0 for vid, _ in batch.provenance
        )
    if not chunks:
        raise ValueError("extract_labeled_features: the manifest has no slices")
    return np.concatenate(chunks), np.asarray(targets, dtype=np.float64)


def train_head(
    model: ModifiedXception,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    config: TrainConfig,
    workers: int = 1,
) -> tuple[ModifiedXception, list[EpochStats]]:
    """Extract features for both manifests, then run the head training loop."""
    xt, yt = extract_labeled_features(
        model, train_manifest, batch_size=config.batch_size, workers=workers
    )
    xv, yv = extract_labeled_features(
        model, val_manifest, batch_size=config.batch_size, workers=workers
    )
    history = fit_head(model, xt, yt, xv, yv, config)
    return model, history


def write_history_csv(history: Sequence[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for row in history:
            writer.writerow([row.epoch] + [repr(float(v)) for v in row[1:]])


def history_summary(history: Sequence[EpochStats]) -> dict[str, dict[str, float]]:
    """Final-epoch values and across-epoch means for every history column."""
    if not history:
        raise ValueError("history_summary: empty history")
    names = [f for f in HISTORY_FIELDS if f != "epoch"]
    final = history[-1]
    return {
        "final": {name: float(getattr(final, name)) for name in names},
        "mean": {
            name: float(np.mean([getattr(row, name) for row in history])) for name in names
        },
    }
