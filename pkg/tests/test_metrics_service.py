"""Tests para métricas y el informe de calibración."""
import json

import numpy as np
import pandas as pd
import pytest

from src.services.format_service import FormatService, quantize_tensor
from src.services.metrics_service import (
    CalibReport,
    LayerReport,
    bits_per_weight,
    layer_errors,
    layer_output_error,
    memory_footprint,
    normalized_metric,
)
from src.utils.errors import ArtifactIOError, ConfigError, ShapeError
from src.utils.kernels import matmul, squared_l2


@pytest.fixture
def report():
    """Fixture con un informe de dos capas."""
    layers = [
        LayerReport(layer="fc1", weight="fc1.weight", policy="quantize", action="ed", m=8, ifm=4, ofm=3,
                    error_before=0.0, error_after=1.25, rtn_error=2.5, rescales=2,
                    direct_bytes=288, low_memory_bytes=48),
        LayerReport(layer="fc2", weight="fc2.weight", policy="calibrate_only", action="none", m=8, ifm=3, ofm=2,
                    error_before=0.5, error_after=0.5, direct_bytes=192, low_memory_bytes=32),
    ]
    return CalibReport(config={"format": "mxint4", "seed": 0}, layers=layers, end_to_end_error=0.75)


# ==================== Tests de error de salida ====================

def test_layer_output_error_zero_for_identical_layers():
    """Verifica que el error es cero si no cambia nada."""
    rng = np.random.default_rng(0)
    A, W = rng.normal(size=(6, 4)), rng.normal(size=(3, 4))
    assert layer_output_error(A, W, A, W) == 0.0
    assert layer_output_error(A, W, A, np.zeros_like(W)) == squared_l2(matmul(A, W.T))


def test_layer_output_error_hand_example():
    """Verifica ||A Wᵀ - Â Ŵᵀ||² en un ejemplo a mano."""
    A = np.array([[1.0, 1.0]])
    W = np.array([[1.0, 2.0]])
    W_hat = np.array([[1.0, 0.0]])
    assert layer_output_error(A, W, A, W_hat) == 4.0


def test_layer_output_error_shape_mismatch():
    """Verifica que formas distintas producen ShapeError."""
    with pytest.raises(ShapeError):
        layer_output_error(np.zeros((2, 3)), np.zeros((1, 3)), np.zeros((2, 2)), np.zeros((1, 3)))


def test_layer_errors_include_rtn_baseline():
    """Verifica que layer_errors calcula el error de RTN con el formato dado."""
    rng = np.random.default_rng(1)
    A, W = rng.normal(size=(8, 8)), rng.normal(size=(2, 8))
    fmt = FormatService().get("b4int3")
    errors = layer_errors(A, A, W, W, fmt)
    assert errors.before == 0.0
    assert errors.after == 0.0
    assert errors.rtn == layer_output_error(A, W, A, quantize_tensor(W, fmt).dequantize())
    assert layer_errors(A, A, W, W).rtn is None


# ==================== Tests de memoria ====================

def test_memory_footprint_examples():
    """Verifica los ejemplos de memoria de ambas estrategias."""
    assert memory_footprint(2 ** 16, 2 ** 16, 1024, 32, "direct") == 3 * 2 ** 34
    assert memory_footprint(2 ** 16, 2 ** 14, 1024, 16, "low_memory") == 2 ** 20
    assert memory_footprint(1, 1, 1, 1, "direct") == 12


def test_low_memory_never_exceeds_direct():
    """Verifica que la estrategia de bajo consumo nunca usa más memoria si block_size <= 3·M."""
    for m in (1, 7, 64, 4096):
        for ofm in (1, 16, 1000):
            for block_size in (1, 2, 4, 8, 32):
                if block_size > 3 * m:
                    continue
                low = memory_footprint(m, ofm, 64, block_size, "low_memory")
                assert low <= memory_footprint(m, ofm, 64, block_size, "direct")


def test_memory_footprint_rejects_bad_input():
    """Verifica ConfigError para dimensiones no positivas o estrategias desconocidas."""
    with pytest.raises(ConfigError):
        memory_footprint(0, 4, 4, 1, "direct")
    with pytest.raises(ConfigError):
        memory_footprint(4, 4, 4, 0, "low_memory")
    with pytest.raises(ConfigError):
        memory_footprint(4, 4, 4, 1, "streaming")


# ==================== Tests de bits y métricas ====================

def test_bits_per_weight():
    """Verifica los bits por peso incluyendo la escala compartida."""
    service = FormatService()
    assert bits_per_weight(service.get("b4int3")) == 4.0
    assert bits_per_weight(service.get("mxint4")) == 4.25
    assert bits_per_weight(service.resolve("int4")) == 12.0


def test_normalized_metric():
    """Verifica la métrica normalizada y el caso de referencia cero."""
    assert normalized_metric(0.75, 1.5) == 0.5
    with pytest.raises(ConfigError):
        normalized_metric(1.0, 0.0)


# ==================== Tests del informe ====================

def test_report_memory_is_peak(report):
    """Verifica que la memoria del informe es el máximo por capa."""
    assert report.memory == {"direct_bytes": 288, "low_memory_bytes": 48}
    assert report.layer("fc2").action == "none"
    with pytest.raises(KeyError):
        report.layer("fc9")


def test_report_save_and_load(tmp_path, report):
    """Verifica que el informe se guarda como JSON y CSV y se vuelve a leer igual."""
    path = tmp_path / "out" / "report.json"
    report.save(path)

    data = json.loads(path.read_text())
    assert data["version"] == 1
    assert data["memory"]["direct_bytes"] == 288
    assert [l["layer"] for l in data["layers"]] == ["fc1", "fc2"]

    frame = pd.read_csv(path.with_suffix(".csv"))
    assert list(frame["layer"]) == ["fc1", "fc2"]
    assert frame.loc[0, "rescales"] == 2

    loaded = CalibReport.load(path)
    assert loaded.compare(report) == []
    assert loaded.layers[1].rtn_error is None


def test_report_save_is_byte_stable(tmp_path, report):
    """Verifica que guardar dos veces da ficheros idénticos."""
    first, second = tmp_path / "a.json", tmp_path / "b.json"
    report.save(first)
    report.save(second)
    assert first.read_bytes() == second.read_bytes()
    assert first.with_suffix(".csv").read_bytes() == second.with_suffix(".csv").read_bytes()


def test_report_compare_finds_differences(report):
    """Verifica que compare detecta campos distintos y respeta la tolerancia."""
    other = CalibReport.from_dict(report.to_dict())
    other.layers[0].error_after += 1e-15
    assert report.compare(other) == []

    other.layers[0].error_after = 2.0
    other.layers[1].action = "update_only"
    other.end_to_end_error = 1.0
    problems = report.compare(other)
    assert len(problems) == 3
    assert any(p.startswith("fc1.error_after") for p in problems)

    other.layers.pop()
    assert "fc2: present in only one report" in report.compare(other)


def test_report_load_errors(tmp_path):
    """Verifica ArtifactIOError para informes ausentes o mal formados."""
    with pytest.raises(ArtifactIOError):
        CalibReport.load(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ArtifactIOError):
        CalibReport.load(bad)
    bad.write_text(json.dumps({"config": {}}))
    with pytest.raises(ArtifactIOError):
        CalibReport.load(bad)
