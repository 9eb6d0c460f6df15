"""Command-line front end: export an archive, or verify an exported file."""

from __future__ import annotations

import argparse
import sys

from ct_diag.weights_io import NtcBindError, NtcError

from ntc_export.archive import ArchiveError
from ntc_export.convert import ExportError, export
from ntc_export.mapping import MappingError
from ntc_export import verify as verify_module


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="ntc-export",
        description="Convert a pretrained backbone weight archive (HDF5) to an "
        "NTC checkpoint, and verify exported outputs against the reference network.",
    )
    sub = parser.add_subparsers(dest="command", metavar="{export,verify}")

    exp = sub.add_parser("export", help="convert an HDF5 weight archive to NTC")
    exp.add_argument("--source", required=True, help="pretrained HDF5 weight archive")
    exp.add_argument(
        "--manifest", required=True,
        help="tensor name manifest written by: ct-diag inspect --manifest-out",
    )
    exp.add_argument("--out", required=True, help="NTC file to write")
    exp.set_defaults(func=cmd_export)

    ver = sub.add_parser(
        "verify", help="compare backbone outputs between the archive and an NTC file"
    )
    ver.add_argument("--source", required=True, help="pretrained HDF5 weight archive")
    ver.add_argument("--ntc", required=True, help="exported NTC checkpoint")
    ver.add_argument("--image", required=True, help="probe image (grayscale slice)")
    ver.add_argument("--input-size", type=int, default=224)
    ver.add_argument("--budget", type=float, default=1e-3,
                     help="max |delta| allowed on the final feature map")
    ver.set_defaults(func=cmd_verify)
    return parser


def cmd_export(args: argparse.Namespace) -> int:
    report = export(args.source, args.manifest, args.out)
    for line in report.lines():
        print(line)
    print(report.summary())
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    report = verify_module.verify_export(
        args.source, args.ntc, args.image, input_size=args.input_size, budget=args.budget
    )
    for line in report.lines():
        print(line)
    return 0 if report.status in ("ok", "skipped") else 1


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (
        ArchiveError,
        MappingError,
        ExportError,
        verify_module.VerifyError,
        NtcError,
        NtcBindError,
        OSError,
        ValueError,
    ) as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
