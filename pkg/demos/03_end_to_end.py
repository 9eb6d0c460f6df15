"""End to end on synthetic data: ingest, train the head, diagnose, evaluate.

Fabricates a small dataset of two slice families with different gray-level
statistics, trains the classifier head on frozen backbone features at a
reduced 64x64 input, then walks a held-out set through slice probabilities,
per-volume majority votes, and a threshold sweep. Runs in a few seconds on
one CPU core.

Run: python3 demos/03_end_to_end.py
"""

import logging.handlers
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

from ct_diag.diagnosis import Rule, ThresholdPolicy, diagnose_volume, sweep_thresholds
from ct_diag.ingest import batch_iter, scan_dataset
from ct_diag.labels import Label
from ct_diag.trainer import TrainConfig, train_head
from ct_diag.xception import build_modified_xception

INPUT_SIZE = 64
RNG = np.random.default_rng(17)

# Two synthetic slice families: dark noisy texture vs bright noisy texture.
FAMILY_MEAN = {Label.COVID: 90.0, Label.NON_COVID: 165.0}


def write_volume(root: Path, label: Label, index: int, n_slices: int = 8) -> None:
    # Volume directory names double as ids, so they must differ across the
    # two class directories.
    stem = "cov" if label is Label.COVID else "non"
    folder = root / ("covid" if label is Label.COVID else "non-covid") / f"{stem}{index:03d}"
    folder.mkdir(parents=True)
    for s in range(n_slices):
        pixels = RNG.normal(FAMILY_MEAN[label], 25.0, size=(32, 32)).clip(0, 255)
        Image.fromarray(pixels.astype(np.uint8), mode="L").save(folder / f"{s:02d}.png")


def banner(title):
    print()
    print(title)
    print("-" * len(title))


with tempfile.TemporaryDirectory() as tmp:
    root = Path(tmp)
    for split, count in (("train", 12), ("val", 6)):
        for i in range(count):
            write_volume(root / split, Label.COVID, i)
            write_volume(root / split, Label.NON_COVID, i)

    banner("ingest")
    # Toy volumes are far shorter than clinical ones and the scanner logs a
    # warning for each, so buffer its log records and report them in one line.
    scan_log = logging.handlers.BufferingHandler(10_000)
    ingest_logger = logging.getLogger("ct_diag.ingest")
    ingest_logger.addHandler(scan_log)
    try:
        train_set = scan_dataset(root / "train", require_labels=True)
        val_set = scan_dataset(root / "val", require_labels=True)
    finally:
        ingest_logger.removeHandler(scan_log)
    print(f"scanner warned {len(scan_log.buffer)} times about unusually short "
          "volumes (8 slices vs the expected 50-700); fine for synthetic data")
    for name, manifest in (("train", train_set), ("val", val_set)):
        print(f"{name}: {len(manifest.volumes)} volumes "
              f"({manifest.n_covid} covid / {manifest.n_noncovid} non-covid), "
              f"{manifest.n_slices} slices")

    banner("train the head on frozen backbone features")
    model = build_modified_xception(input_size=INPUT_SIZE).init_weights(seed=3)
    model.freeze_base()
    # Small batches on purpose: the head's batch-norm inference statistics are
    # exponential moving averages (momentum 0.99), so they need a few hundred
    # update steps before INFER-mode outputs match what training measured.
    config = TrainConfig(epochs=13, batch_size=8, seed=3)
    digest_before = model.base_digest()
    model, history = train_head(model, train_set, val_set, config)
    print(f"{'epoch':>5} {'train_loss':>10} {'val_loss':>8} {'val_acc':>7} {'lr':>9}")
    for row in history:
        print(f"{row.epoch:>5} {row.train_loss:>10.4f} {row.val_loss:>8.4f} "
              f"{row.val_acc:>7.3f} {row.lr:>9.6f}")
    print(f"backbone untouched by training: {model.base_digest() == digest_before}")
    print("note: early epochs evaluate poorly because validation runs in inference")
    print("mode, whose batch-norm statistics start at init and converge over training")

    banner("slice probabilities -> majority vote per volume")
    policy = ThresholdPolicy(0.5)
    shown = 0
    correct = 0
    predictions = []
    for volume in val_set.volumes:
        probs = np.concatenate([
            model.forward(batch.tensor)
            for batch in batch_iter(volume, batch_size=64, size=INPUT_SIZE)
        ])
        verdict = diagnose_volume(probs, policy, Rule.MAJORITY, volume_id=volume.volume_id)
        predictions.append((probs, volume.label))
        correct += verdict.diagnosis is volume.label
        if shown < 4:
            print(f"{volume.volume_id}: {verdict.covid_count} covid / "
                  f"{verdict.noncovid_count} non-covid slices -> {verdict.diagnosis.name} "
                  f"(truth {volume.label.name})")
            shown += 1
    print(f"... volume accuracy at threshold 0.5: {correct}/{len(val_set.volumes)}")

    banner("threshold sweep on the held-out volumes")
    print(f"{'threshold':>9} {'accuracy':>8} {'macro F1':>8} {'ci radius':>9}")
    for threshold, report in sweep_thresholds(predictions, (0.15, 0.5, 0.9)):
        print(f"{threshold:>9.2f} {report.accuracy:>8.3f} {report.macro_f1_mean:>8.3f} "
              f"{report.ci_radius:>9.4f}")
