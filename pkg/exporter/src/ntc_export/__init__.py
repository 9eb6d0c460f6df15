"""Pretrained backbone importer: legacy HDF5 weight archives to NTC.

``export`` converts the headless pretrained archive into a backbone-only
NTC checkpoint named after the diagnosis model's manifest; ``verify_export``
replays one probe through both implementations and reports the elementwise
deviation of the final feature maps.
"""

from ntc_export.archive import ArchiveError, SourceTensor, read_archive
from ntc_export.convert import ExportError, ExportReport, export
from ntc_export.mapping import MappingError, NameMap, build_name_map, parse_manifest
from ntc_export.verify import VerifyError, VerifyReport, verify_export

__all__ = [
    "ArchiveError",
    "SourceTensor",
    "read_archive",
    "ExportError",
    "ExportReport",
    "export",
    "MappingError",
    "NameMap",
    "build_name_map",
    "parse_manifest",
    "VerifyError",
    "VerifyReport",
    "verify_export",
]
