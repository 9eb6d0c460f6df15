"""Cross-framework verification against the reference implementation.

These tests need the reference framework; everything else in the suite runs
without it. The session fixture builds a reference network with plausible
random weights, normalizes its final feature scale to O(1) so absolute
deviation budgets are meaningful, saves it in the legacy archive layout,
and exports it once.
"""

import os
import time
from types import SimpleNamespace

import numpy as np
import pytest

from ct_diag.weights_io import bind_weights, load_ntc, save_ntc
from ct_diag.xception import build_modified_xception

from ntc_export.convert import export
from ntc_export.verify import verify_export

from archive_builder import write_gray_png, write_legacy_archive
from gatelog import record_gate


def _load_keras():
    os.environ.setdefault("CUDA_VISIBLE_DEVICES", "-1")
    os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")
    try:
        import keras
        return keras
    except ImportError:
        return None


def _leaf(weight) -> str:
    path = getattr(weight, "path", None) or weight.name
    return path.split("/")[-1].removesuffix(":0")


def _draw(rng, shape, leaf):
    if leaf == "moving_variance":
        arr = np.abs(1.0 + 0.05 * rng.standard_normal(shape)) + 0.1
    elif leaf == "gamma":
        arr = 1.0 + 0.05 * rng.standard_normal(shape)
    elif leaf in ("beta", "moving_mean"):
        arr = 0.02 * rng.standard_normal(shape)
    else:
        fan_in = shape[0] * shape[1] if leaf == "depthwise_kernel" else int(np.prod(shape[:3]))
        arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return arr.astype(np.float32)


@pytest.fixture(scope="session")
def reference_setup(tmp_path_factory, manifest_file):
    keras = _load_keras()
    if keras is None:
        return None
    model = keras.applications.Xception(
        weights=None, include_top=False, input_shape=(None, None, 3)
    )
    rng = np.random.default_rng(11)
    for layer in model.layers:
        if layer.weights:
            layer.set_weights([_draw(rng, tuple(w.shape), _leaf(w)) for w in layer.weights])
    # Random weights blow up the feature scale through the residual adds;
    # divide the last BN's affine pair by the observed spread so the final
    # map is O(1) and the absolute deviation budget is meaningful.
    probe = rng.uniform(-1.0, 1.0, size=(1, 224, 224, 3)).astype(np.float32)
    spread = float(np.asarray(model(probe, training=False)).std()) or 1.0
    final_bn = model.get_layer("block14_sepconv2_bn")
    gamma, beta, mean, variance = final_bn.get_weights()
    final_bn.set_weights([gamma / spread, beta / spread, mean, variance])

    root = tmp_path_factory.mktemp("reference")
    archive = root / "pretrained.h5"
    table, values = [], {}
    for layer in model.layers:
        rows = []
        for weight, arr in zip(layer.weights, layer.get_weights()):
            wname = f"{layer.name}/{_leaf(weight)}:0"
            rows.append((wname, tuple(arr.shape)))
            values[(layer.name, wname)] = np.asarray(arr, dtype=np.float32)
        table.append((layer.name, rows))
    write_legacy_archive(archive, table, values)

    ntc = root / "base.ntc"
    export(archive, manifest_file, ntc)

    img_rng = np.random.default_rng(5)
    probes = []
    for i in range(3):
        path = root / f"probe{i}.png"
        write_gray_png(path, img_rng.integers(0, 256, size=(256, 256)).astype(np.uint8))
        probes.append(path)
    zero = root / "zero.png"
    write_gray_png(zero, np.zeros((256, 256), dtype=np.uint8))
    return SimpleNamespace(archive=archive, ntc=ntc, probes=probes, zero=zero, root=root)


def test_gate_pretrained_export(reference_setup):
    """Exported base binds cleanly and matches the reference forward pass."""
    name = "pretrained-export"
    start = time.perf_counter()
    if reference_setup is None:
        record_gate(f"[SKIP] {name} -- reference ecosystem unavailable")
        pytest.skip("reference ecosystem unavailable")
    failures = []

    entries = load_ntc(reference_setup.ntc)
    scalars = sum(values.size for _, _, values in entries)
    if scalars != 20_861_480:
        failures.append(f"exported scalar count {scalars}")
    try:
        bind_weights(
            build_modified_xception(input_size=224), entries, allow_missing_head=True
        )
    except Exception as exc:
        failures.append(f"bind failed: {exc}")

    deltas = []
    for path in reference_setup.probes:
        report = verify_export(reference_setup.archive, reference_setup.ntc, path)
        deltas.append(report.max_abs_delta)
        if report.status != "ok":
            failures.append(f"{path.name}: status={report.status} {report.detail}")
        elif report.max_abs_delta > 1e-3:
            failures.append(f"{path.name}: max |delta| {report.max_abs_delta:.2e}")

    elapsed = time.perf_counter() - start
    worst = max(deltas) if deltas else float("nan")
    verdict = "PASS" if not failures else "FAIL"
    detail = f"3 probes, worst max |delta| {worst:.2e}" if not failures else "; ".join(failures)
    record_gate(f"[{verdict}] {name} ({elapsed:.1f}s) -- {detail}")
    print(f"[{verdict}] {name} ({elapsed:.1f}s) -- {detail}")
    assert not failures, detail


class TestVerifyExport:
    def test_corrupted_tensor_names_first_divergent_block(self, reference_setup, tmp_path):
        if reference_setup is None:
            pytest.skip("reference ecosystem unavailable")
        entries = [(n, v) for n, _, v in load_ntc(reference_setup.ntc)]
        corrupted = [
            (n, v * 3.0 if n == "middle/block8/sepconv2/pointwise" else v)
            for n, v in entries
        ]
        bad_ntc = tmp_path / "corrupt.ntc"
        save_ntc(corrupted, bad_ntc)
        report = verify_export(
            reference_setup.archive, bad_ntc, reference_setup.probes[0], input_size=96
        )
        assert report.status == "fail"
        assert report.max_abs_delta > 1e-3
        assert report.first_divergence == "middle/block8"

    def test_zero_probe_stays_finite(self, reference_setup):
        if reference_setup is None:
            pytest.skip("reference ecosystem unavailable")
        report = verify_export(
            reference_setup.archive, reference_setup.ntc, reference_setup.zero, input_size=96
        )
        assert report.status == "ok"
        assert np.isfinite(report.max_abs_delta)

    def test_report_lines_mention_budget(self, reference_setup):
        if reference_setup is None:
            pytest.skip("reference ecosystem unavailable")
        report = verify_export(
            reference_setup.archive, reference_setup.ntc, reference_setup.probes[1],
            input_size=96,
        )
        text = "\n".join(report.lines())
        assert "max |delta|" in text
        assert "budget" in text
