import pytest

from ct_diag.weights_io import write_name_manifest
from ct_diag.xception import build_modified_xception

from archive_builder import build_archive
from gatelog import GATE_LINES


def pytest_terminal_summary(terminalreporter):
    if GATE_LINES:
        terminalreporter.section("export acceptance gates")
        for line in GATE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def manifest_file(tmp_path_factory):
    """Name manifest of the full diagnosis model (base and head tensors)."""
    model = build_modified_xception(input_size=64)
    path = tmp_path_factory.mktemp("manifest") / "names.txt"
    write_name_manifest(((pt.name, pt.shape) for pt in model.registry.values()), path)
    return path


@pytest.fixture(scope="session")
def source_archive(tmp_path_factory):
    """One synthetic pretrained archive shared by the read-only tests."""
    path = tmp_path_factory.mktemp("archive") / "pretrained.h5"
    values = build_archive(path, seed=0)
    return path, values
