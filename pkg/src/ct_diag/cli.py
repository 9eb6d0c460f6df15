"""Command-line surface: inspect | predict | evaluate | sweep | train-head.

Exit codes are a stable scripting contract: 0 success, 1 usage error,
2 weight/model error, 3 data error. Machine-readable output is JSON
(inspect, evaluate) or CSV (predict, training history); human-oriented
summaries go to the other stream so pipelines stay clean.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from .diagnosis import (
    DEFAULT_THRESHOLDS,
    Rule,
    ThresholdPolicy,
    diagnose_volume,
    sweep_thresholds,
)
from .ingest import CTVolume, IngestError, batch_iter, default_workers, scan_dataset
from .trainer import (
    TrainConfig,
    TrainingError,
    history_summary,
    train_head,
    write_history_csv,
)
from .weights_io import NtcBindError, NtcError, bind_weights, load_ntc, save_ntc, write_name_manifest
from .xception import ModifiedXception, WeightsNotLoadedError, build_modified_xception

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_WEIGHTS = 2
EXIT_DATA = 3

_PREDICT_BATCH = 128


class UsageError(Exception):
    """Bad flag values discovered after argparse (ranges, formats)."""


class _Parser(argparse.ArgumentParser):
    """argparse reserves exit code 2 for usage errors; this remaps them to 1."""

    def error(self, message: str) -> None:  # noqa: D401 - argparse hook
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common_model_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument(
        "--input-size", type=int, default=224, metavar="N",
        help="square input edge in pixels (default 224)",
    )
    sub.add_argument(
        "--workers", type=int, default=None, metavar="N",
        help="parallel slice decoders; defaults to $CT_DIAG_WORKERS or 1",
    )


def _add_evaluate_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--weights", required=True, help="NTC checkpoint to load")
    sub.add_argument("--data", required=True, help="labeled dataset root")
    sub.add_argument(
        "--thresholds", default=",".join(str(t) for t in DEFAULT_THRESHOLDS),
        help="comma-separated probability cutoffs, evaluated in the order given",
    )
    sub.add_argument(
        "--rule", choices=[r.value for r in Rule], default=Rule.MAJORITY.value,
        help="patient-level aggregation rule",
    )
    sub.add_argument("--z", type=float, default=1.96, help="confidence multiplier")
    sub.add_argument("--out", help="write the JSON report here instead of stdout")
    _add_common_model_flags(sub)
    sub.set_defaults(func=cmd_evaluate)


def build_parser() -> _Parser:
    parser = _Parser(prog="ct-diag", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    inspect = subs.add_parser("inspect", help="print model structure constants as JSON")
    inspect.add_argument("--weights", help="optional NTC checkpoint to validate by binding")
    inspect.add_argument("--manifest-out", help="also write the tensor-name manifest here")
    _add_common_model_flags(inspect)
    inspect.set_defaults(func=cmd_inspect)

    predict = subs.add_parser("predict", help="diagnose each CT volume under a root")
    predict.add_argument("--weights", required=True, help="NTC checkpoint to load")
    predict.add_argument("--input", required=True, help="root holding one directory per volume")
    predict.add_argument("--threshold", type=float, default=0.5, help="slice probability cutoff")
    predict.add_argument(
        "--rule", choices=[r.value for r in Rule], default=Rule.MAJORITY.value,
        help="patient-level aggregation rule",
    )
    predict.add_argument("--out", help="write the CSV here instead of stdout")
    _add_common_model_flags(predict)
    predict.set_defaults(func=cmd_predict)

    evaluate = subs.add_parser("evaluate", help="score a labeled dataset at each threshold")
    _add_evaluate_flags(evaluate)
    sweep = subs.add_parser("sweep", help="alias of evaluate for multi-threshold sweeps")
    _add_evaluate_flags(sweep)

    train = subs.add_parser("train-head", help="train the classification head")
    train.add_argument("--train", required=True, help="labeled training root")
    train.add_argument("--val", required=True, help="labeled validation root")
    train.add_argument("--weights-in", help="starting NTC checkpoint; random init if omitted")
    train.add_argument("--weights-out", required=True, help="where to save the trained NTC")
    train.add_argument("--history", help="where to save the per-epoch history CSV")
    train.add_argument("--epochs", type=int, default=13)
    train.add_argument("--batch", type=int, default=128)
    train.add_argument("--lr", type=float, default=0.001)
    train.add_argument("--patience", type=int, default=2)
    train.add_argument("--seed", type=int, default=0)
    _add_common_model_flags(train)
    train.set_defaults(func=cmd_train_head)

    return parser


# ------------------------------------------------------------------ helpers


def _resolve_workers(args: argparse.Namespace) -> int:
    try:
        workers = args.workers if args.workers is not None else default_workers()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if workers < 1:
        raise UsageError(f"--workers must be >= 1, got {workers}")
    return workers


def _build_model(
    input_size: int,
    weights: str | None,
    base_only_ok: bool = False,
    head_seed: int = 0,
) -> ModifiedXception:
    try:
        model = build_modified_xception(input_size=input_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if weights is not None:
        try:
            entries = load_ntc(weights)
        except OSError as exc:
            raise NtcError(f"cannot read weights file {weights}: {exc}") from exc
        # Pretrained backbones ship without head tensors; where a fresh head
        # is acceptable (inspect, train-head) bind the base and draw one.
        has_head = any(name.startswith("head/") for name, _, _ in entries)
        if base_only_ok and not has_head:
            bind_weights(model, entries, allow_missing_head=True)
            model.init_head(seed=head_seed)
        else:
            bind_weights(model, entries)
    model.freeze_base()
    return model


def _scan_nonempty(root: str, require_labels: bool) -> "DatasetManifest":
    manifest = scan_dataset(root, require_labels=require_labels)
    if not manifest.volumes:
        raise IngestError(f"no CT volumes found under {root}")
    return manifest


def _volume_probs(model: ModifiedXception, volume: CTVolume, workers: int) -> np.ndarray:
    chunks = [
        model.forward(batch.tensor)
        for batch in batch_iter(
            volume, batch_size=_PREDICT_BATCH, size=model.input_size, workers=workers
        )
    ]
    return np.concatenate(chunks)


def _parse_thresholds(text: str) -> list[float]:
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            values.append(float(part))
        except ValueError as exc:
            raise UsageError(f"--thresholds: {part!r} is not a number") from exc
    if not values:
        raise UsageError("--thresholds must name at least one cutoff")
    return values


def _write_or_print(text: str, out: str | None) -> None:
    if out is None:
        print(text, end="" if text.endswith("\n") else "\n")
    else:
        Path(out).write_text(text)


# ----------------------------------------------------------------- commands


def cmd_inspect(args: argparse.Namespace) -> int:
    model = _build_model(args.input_size, args.weights, base_only_ok=True)
    total, trainable = model.count_params()
    info = {
        "total_params": total,
        "trainable_params": trainable,
        "base_params": sum(
            pt.size for pt in model.registry.values() if not pt.name.startswith("head/")
        ),
        "conv_layer_count": model.conv_layer_count,
        "base_output_shape": list(model.base_output_shape),
    }
    if args.manifest_out:
        write_name_manifest(
            ((pt.name, pt.shape) for pt in model.registry.values()), args.manifest_out
        )
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    workers = _resolve_workers(args)
    model = _build_model(args.input_size, args.weights)
    try:
        policy = ThresholdPolicy(args.threshold)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rule = Rule(args.rule)
    manifest = _scan_nonempty(args.input, require_labels=False)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["volume_id", "n_slices", "n_covid_slices", "n_noncovid_slices", "diagnosis"])
    for volume in manifest.volumes:
        probs = _volume_probs(model, volume, workers)
        vp = diagnose_volume(probs, policy, rule, volume_id=volume.volume_id)
        writer.writerow(
            [vp.volume_id, len(volume), vp.covid_count, vp.noncovid_count, vp.diagnosis.value]
        )
    _write_or_print(buffer.getvalue(), args.out)
    return EXIT_OK


def _summary_table(entries: list[dict]) -> str:
    lines = []
    for entry in entries:
        for level in ("volume", "slice"):
            r = entry[level]
            lines.append(
                f"threshold={entry['threshold']:g} {level:>6}: "
                f"acc={r['accuracy']:.4f} macro_f1_mean={r['macro_f1_mean']:.4f} "
                f"macro_f1_avgpr={r['macro_f1_avgpr']:.4f} "
                f"ci=±{r['ci_radius']:.4f} n={r['n']}"
            )
    return "\n".join(lines) + "\n"


def cmd_evaluate(args: argparse.Namespace) -> int:
    workers = _resolve_workers(args)
    thresholds = _parse_thresholds(args.thresholds)
    model = _build_model(args.input_size, args.weights)
    rule = Rule(args.rule)
    manifest = _scan_nonempty(args.data, require_labels=True)
    pairs = [
        (_volume_probs(model, volume, workers), volume.label) for volume in manifest.volumes
    ]
    by_volume = sweep_thresholds(pairs, thresholds, rule=rule, z=args.z, level="volume")
    by_slice = sweep_thresholds(pairs, thresholds, rule=rule, z=args.z, level="slice")
    entries = [
        {"threshold": t, "volume": volume_report.as_dict(), "slice": slice_report.as_dict()}
        for (t, volume_report), (_, slice_report) in zip(by_volume, by_slice)
    ]
    report = {"rule": rule.value, "z": args.z, "thresholds": entries}
    text = json.dumps(report, indent=2) + "\n"
    table = _summary_table(entries)
    if args.out is None:
        print(text, end="")
        print(table, end="", file=sys.stderr)
    else:
        Path(args.out).write_text(text)
        print(table, end="")
    return EXIT_OK


def cmd_train_head(args: argparse.Namespace) -> int:
    workers = _resolve_workers(args)
    model = _build_model(args.input_size, args.weights_in, base_only_ok=True, head_seed=args.seed)
    if args.weights_in is None:
        model.init_weights(seed=args.seed)
    try:
        config = TrainConfig(
            learning_rate=args.lr,
            batch_size=args.batch,
            epochs=args.epochs,
            plateau_patience=args.patience,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train_manifest = _scan_nonempty(args.train, require_labels=True)
    val_manifest = _scan_nonempty(args.val, require_labels=True)
    model, history = train_head(model, train_manifest, val_manifest, config, workers=workers)
    save_ntc(model.state_items(), args.weights_out)
    if args.history:
        write_history_csv(history, args.history)
    summary = history_summary(history)
    final, mean = summary["final"], summary["mean"]
    print(
        f"trained {config.epochs} epochs; "
        f"final: loss={final['train_loss']:.4f} val_loss={final['val_loss']:.4f} "
        f"val_acc={final['val_acc']:.4f}; mean val_acc={mean['val_acc']:.4f}"
    )
    print(f"weights saved to {args.weights_out}", file=sys.stderr)
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NtcError, NtcBindError, WeightsNotLoadedError, TrainingError) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_WEIGHTS
    except IngestError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())
