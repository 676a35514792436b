"""Tests para el grafo del modelo y la calibración capa a capa."""
import numpy as np
import pytest

from src.managers.graph_manager import (
    CalibrationOptions,
    GraphManager,
    ModelGraph,
    calibrate_model,
    forward,
    forward_from,
    topological_order,
)
from src.services.diffusion_service import ExecutionMode
from src.services.fixture_service import FixtureService
from src.services.format_service import FormatService
from src.utils.errors import ArtifactIOError, ConfigError, GraphError, NumericalAbort, ShapeError


def linear(node_id, src, weight=None, bias=None, policy="quantize"):
    node = {"id": node_id, "kind": "linear", "inputs": [src], "weight": weight or f"{node_id}.weight", "policy": policy}
    if bias:
        node["bias"] = bias
    return node


def fig1_graph(function="relu", width=4):
    """Grafo x -> f1 -> r1 -> f2, f3 = f2 + r1, f4."""
    return ModelGraph.from_dict({
        "input": "x",
        "output": "f4",
        "nodes": [
            {"id": "x", "kind": "input", "width": width},
            linear("f1", "x"),
            {"id": "r1", "kind": "elementwise", "inputs": ["f1"], "function": function},
            linear("f2", "r1"),
            {"id": "f3", "kind": "add", "inputs": ["f2", "r1"]},
            linear("f4", "f3"),
        ],
    })


def fixture_parts(kind="mlp", seed=0, sizes=None, num_samples=64):
    """Grafo, pesos y muestras de un fixture sintético."""
    fixture = FixtureService(seed).generate(kind, sizes, num_samples)
    return ModelGraph.from_dict(fixture.model), fixture.weights, fixture.samples


@pytest.fixture
def formats():
    """Fixture con el registro de formatos."""
    return FormatService()


# ==================== Tests de orden topológico ====================

def test_topological_order_chain():
    """Verifica el orden de una cadena declarada al revés."""
    graph = ModelGraph.from_dict({
        "input": "x",
        "output": "b",
        "nodes": [
            linear("b", "a"),
            {"id": "a", "kind": "elementwise", "inputs": ["x"], "function": "relu"},
            {"id": "x", "kind": "input", "width": 2},
        ],
    })
    assert graph.order == ["x", "a", "b"]


def test_topological_order_fig1():
    """Verifica el orden del grafo con conexión residual."""
    assert topological_order(fig1_graph()) == ["x", "f1", "r1", "f2", "f3", "f4"]


def test_topological_order_ties_follow_declaration():
    """Verifica que los empates se resuelven por orden de declaración."""
    graph = ModelGraph.from_dict({
        "input": "x",
        "output": "s",
        "nodes": [
            {"id": "x", "kind": "input", "width": 2},
            {"id": "b", "kind": "elementwise", "inputs": ["x"], "function": "identity"},
            {"id": "a", "kind": "elementwise", "inputs": ["x"], "function": "identity"},
            {"id": "s", "kind": "add", "inputs": ["a", "b"]},
        ],
    })
    assert graph.order == ["x", "b", "a", "s"]


def test_topological_order_detects_cycle():
    """Verifica que un ciclo produce GraphError."""
    with pytest.raises(GraphError, match="cycle"):
        ModelGraph.from_dict({
            "input": "x",
            "output": "b",
            "nodes": [
                {"id": "x", "kind": "input", "width": 2},
                linear("a", "b"),
                linear("b", "a"),
            ],
        })


def test_topological_order_random_dag():
    """Verifica en DAGs aleatorios que cada nodo aparece después de sus entradas."""
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 15))
        nodes = [{"id": "n0", "kind": "input", "width": 3}]
        for i in range(1, n):
            k = int(rng.integers(1, min(i, 3) + 1))
            sources = [f"n{j}" for j in rng.choice(i, size=k, replace=False)]
            if k == 1:
                nodes.append({"id": f"n{i}", "kind": "elementwise", "inputs": sources, "function": "identity"})
            else:
                nodes.append({"id": f"n{i}", "kind": "add", "inputs": sources})
        nodes = [nodes[i] for i in rng.permutation(n)]

        graph = ModelGraph.from_dict({"input": "n0", "output": f"n{n - 1}", "nodes": nodes})
        position = {name: i for i, name in enumerate(graph.order)}
        assert sorted(graph.order) == sorted(node["id"] for node in nodes)
        for node in graph.nodes.values():
            for src in node.inputs:
                assert position[src] < position[node.id]
        forward(graph, {}, rng.normal(size=(4, 3)))


# ==================== Tests de validación ====================

@pytest.mark.parametrize("nodes", [
    [{"id": "x", "kind": "input", "width": 2}, {"id": "x", "kind": "elementwise", "inputs": ["x"], "function": "relu"}],
    [{"id": "x", "kind": "input", "width": 2}, linear("y", "missing")],
    [{"id": "x", "kind": "input", "width": 2}, {"id": "y", "kind": "linear", "inputs": ["x"]}],
    [{"id": "x", "kind": "input", "width": 2}, {"id": "y", "kind": "elementwise", "inputs": ["x"], "function": "tanh"}],
    [{"id": "x", "kind": "input", "width": 2}, {"id": "y", "kind": "add", "inputs": ["x"]}],
    [{"id": "x", "kind": "input", "width": 2}, {"id": "y", "kind": "conv", "inputs": ["x"]}],
    [{"id": "x", "kind": "input"}, {"id": "y", "kind": "elementwise", "inputs": ["x"], "function": "relu"}],
    [{"id": "x", "kind": "input", "width": 2}, {"id": "y", "kind": "input", "width": 2}],
    [{"id": "x", "kind": "input", "width": 2}, {"kind": "elementwise", "inputs": ["x"], "function": "relu"}],
])
def test_invalid_graphs(nodes):
    """Verifica que las descripciones mal formadas producen GraphError."""
    with pytest.raises(GraphError):
        ModelGraph.from_dict({"input": "x", "output": "y", "nodes": nodes})


def test_invalid_graph_endpoints():
    """Verifica entrada y salida desconocidas o ausentes."""
    nodes = [{"id": "x", "kind": "input", "width": 2}]
    with pytest.raises(GraphError):
        ModelGraph.from_dict({"input": "x", "output": "z", "nodes": nodes})
    with pytest.raises(GraphError):
        ModelGraph.from_dict({"input": "x", "nodes": nodes})
    with pytest.raises(GraphError):
        ModelGraph.from_dict({"input": "x", "output": "x"})
    assert isinstance(GraphError("x"), ConfigError)


def test_graph_save_and_load(tmp_path):
    """Verifica que el grafo se guarda y se vuelve a leer igual."""
    graph = fig1_graph()
    path = tmp_path / "model.json"
    graph.save(path)
    loaded = ModelGraph.load(path)
    assert loaded.to_dict() == graph.to_dict()
    assert loaded.order == graph.order
    with pytest.raises(ArtifactIOError):
        ModelGraph.load(tmp_path / "missing.json")


# ==================== Tests de propagación ====================

def test_identity_fig1_reproduces_input():
    """Verifica que con pesos identidad el grafo residual devuelve la entrada."""
    graph = fig1_graph(function="identity")
    weights = {"f1.weight": np.eye(4), "f2.weight": np.eye(4), "f4.weight": 0.5 * np.eye(4)}
    samples = np.random.default_rng(1).normal(size=(6, 4))
    trace = forward(graph, weights, samples)
    assert np.array_equal(trace["f4"], samples)
    assert np.array_equal(trace["f3"], 2 * samples)


def test_single_linear_layer():
    """Verifica X Wᵀ + b para una sola capa."""
    graph = ModelGraph.from_dict({
        "input": "x",
        "output": "fc",
        "nodes": [{"id": "x", "kind": "input", "width": 3}, linear("fc", "x", bias="fc.bias")],
    })
    rng = np.random.default_rng(2)
    weights = {"fc.weight": rng.normal(size=(2, 3)), "fc.bias": rng.normal(size=2)}
    X = rng.normal(size=(5, 3))
    out = forward(graph, weights, X)["fc"]
    np.testing.assert_allclose(out, X @ weights["fc.weight"].T + weights["fc.bias"], rtol=1e-12)


def test_fig1_fixture_matches_hand_composition():
    """Verifica el grafo residual frente a la composición escrita a mano."""
    graph, weights, samples = fixture_parts("fig1", seed=3, sizes=[8], num_samples=10)
    w = {name: np.asarray(value, dtype=np.float64) for name, value in weights.items()}
    X = np.asarray(samples, dtype=np.float64)

    r1 = np.maximum(X @ w["f1.weight"].T + w["f1.bias"], 0.0)
    f3 = r1 @ w["f2.weight"].T + w["f2.bias"] + r1
    expected = f3 @ w["f4.weight"].T + w["f4.bias"]
    np.testing.assert_allclose(forward(graph, weights, samples)["f4"], expected, rtol=1e-10, atol=1e-12)


def test_mlp_fixture_matches_hand_composition():
    """Verifica el MLP frente a la composición escrita a mano."""
    graph, weights, samples = fixture_parts("mlp", seed=4)
    w = {name: np.asarray(value, dtype=np.float64) for name, value in weights.items()}
    h = np.asarray(samples, dtype=np.float64)
    for i in (1, 2):
        h = np.maximum(h @ w[f"fc{i}.weight"].T + w[f"fc{i}.bias"], 0.0)
    expected = h @ w["fc3.weight"].T + w["fc3.bias"]
    np.testing.assert_allclose(forward(graph, weights, samples)[graph.output], expected, rtol=1e-10, atol=1e-12)


def test_descendants():
    """Verifica los descendientes de cada nodo."""
    graph = fig1_graph()
    assert graph.descendants("f1") == {"r1", "f2", "f3", "f4"}
    assert graph.descendants("f2") == {"f3", "f4"}
    assert graph.descendants("f4") == set()


def test_forward_from_recomputes_downstream_only():
    """Verifica que forward_from solo recalcula el nodo cambiado y lo que depende de él."""
    graph, weights, samples = fixture_parts("fig1", seed=5, sizes=[6], num_samples=8)
    trace = forward(graph, weights, samples)

    changed = dict(weights)
    changed["f2.weight"] = weights["f2.weight"] * 0.5
    updated = forward_from(graph, changed, trace, "f2")

    for node_id in ("x", "f1", "r1"):
        assert updated[node_id] is trace[node_id]
    expected = forward(graph, changed, samples)
    for node_id in graph.order:
        assert np.array_equal(updated[node_id], expected[node_id])


def test_forward_errors():
    """Verifica los errores de forma y de tensores ausentes."""
    graph, weights, samples = fixture_parts("mlp", seed=6)
    with pytest.raises(ShapeError):
        forward(graph, weights, samples[:, :-1])
    with pytest.raises(ShapeError):
        forward(graph, weights, samples[:0])
    with pytest.raises(ArtifactIOError):
        forward(graph, {k: v for k, v in weights.items() if k != "fc2.weight"}, samples)
    bad = dict(weights)
    bad["fc2.weight"] = weights["fc2.weight"][:, :-1]
    with pytest.raises(ShapeError):
        forward(graph, bad, samples)


# ==================== Tests de calibración ====================

def test_calibration_quantizes_marked_layers(formats):
    """Verifica que las capas quantize se cuantizan y la última calibrate_only queda intacta."""
    graph, weights, samples = fixture_parts("mlp", seed=7)
    outcome = calibrate_model(graph, weights, samples, formats.resolve("mxint4", 8))

    assert sorted(outcome.quantized) == ["fc1.weight", "fc2.weight"]
    assert outcome.calibrated == {"fc1.weight", "fc2.weight"}
    for name, qt in outcome.quantized.items():
        assert np.array_equal(qt.dequantize(), outcome.weights[name])
    assert outcome.weights["fc3.weight"] is weights["fc3.weight"]

    report = outcome.report
    assert [l.layer for l in report.layers] == ["fc1", "fc2", "fc3"]
    assert [l.action for l in report.layers] == ["ed", "ed", "none"]
    assert report.layer("fc3").rtn_error is None
    assert report.layer("fc1").error_before == 0.0
    assert report.config["format_name"] == "mxint4_b8"
    assert report.config["policies"] == {"fc1": "quantize", "fc2": "quantize", "fc3": "calibrate_only"}
    assert report.end_to_end_error > 0.0


def test_all_frozen_model_is_untouched(formats):
    """Verifica que un modelo con todas las capas congeladas no cambia."""
    graph, weights, samples = fixture_parts("mlp", seed=8)
    data = graph.to_dict()
    for node in data["nodes"]:
        if node["kind"] == "linear":
            node["policy"] = "frozen"
    graph = ModelGraph.from_dict(data)

    manager = GraphManager(graph, weights, samples)
    outcome = manager.calibrate(formats.get("mxint4"), CalibrationOptions(calibrate_unquantized=True))
    assert outcome.quantized == {}
    assert outcome.calibrated == set()
    for name, value in weights.items():
        assert outcome.weights[name] is value
    for node_id in graph.order:
        assert np.array_equal(manager.original_trace[node_id], manager.quantized_trace[node_id])
    assert outcome.report.end_to_end_error == 0.0
    assert {l.action for l in outcome.report.layers} == {"none"}


def test_representable_model_is_a_fixed_point(formats):
    """Verifica que pesos representables no cambian y el error de extremo a extremo es cero."""
    graph, weights, samples = fixture_parts("mlp", seed=9)
    rng = np.random.default_rng(9)
    weights = {
        name: (rng.integers(-7, 8, size=value.shape) * 2.0 ** -3 if name.endswith(".weight") else value)
        for name, value in weights.items()
    }
    outcome = calibrate_model(graph, weights, samples, formats.resolve("mxint4", 8),
                              CalibrationOptions(strategy=ExecutionMode.DIRECT))
    for name in ("fc1.weight", "fc2.weight"):
        assert np.array_equal(outcome.weights[name], weights[name])
    assert outcome.report.end_to_end_error == 0.0
    assert all(l.error_after == 0.0 for l in outcome.report.layers)


def test_update_only_last_layer_never_hurts(formats):
    """Verifica que calibrar la última capa sin cuantizar no empeora el error de extremo a extremo."""
    fmt = formats.resolve("mxint4", 8)
    plain_total, calibrated_total = 0.0, 0.0
    for seed in range(20):
        graph, weights, samples = fixture_parts("mlp", seed=100 + seed, sizes=[8, 16, 16, 4], num_samples=32)
        plain = calibrate_model(graph, weights, samples, fmt, CalibrationOptions())
        calibrated = calibrate_model(graph, weights, samples, fmt, CalibrationOptions(calibrate_unquantized=True))

        last = calibrated.report.layer("fc3")
        assert last.action == "update_only"
        assert last.error_after <= last.error_before * (1 + 1e-12)
        assert "fc3.weight" in calibrated.calibrated
        assert "fc3.weight" not in calibrated.quantized
        assert calibrated.report.end_to_end_error <= plain.report.end_to_end_error * (1 + 1e-9)
        plain_total += plain.report.end_to_end_error
        calibrated_total += calibrated.report.end_to_end_error
    assert calibrated_total < plain_total


def test_diffusion_beats_round_to_nearest_end_to_end(formats):
    """Verifica que en 20 semillas la difusión reduce el error total del modelo frente a RTN."""
    fmt = formats.resolve("mxint4", 4)
    ed_total, rtn_total = 0.0, 0.0
    for seed in range(20):
        graph, weights, samples = fixture_parts("mlp", seed=200 + seed)
        ed_total += calibrate_model(graph, weights, samples, fmt, CalibrationOptions(mode="ed")).report.end_to_end_error
        rtn_total += calibrate_model(graph, weights, samples, fmt, CalibrationOptions(mode="rtn")).report.end_to_end_error
    assert ed_total < rtn_total


def test_quantized_activations_feed_first_layer(formats):
    """Verifica que con activaciones cuantizadas la primera capa ya hereda error."""
    graph, weights, samples = fixture_parts("mlp", seed=10)
    outcome = calibrate_model(graph, weights, samples, formats.get("mxint4"),
                              CalibrationOptions(quantize_activations=True))
    assert outcome.report.config["quantize_activations"] is True
    assert outcome.report.layer("fc1").error_before > 0.0


def test_numerical_abort_names_the_layer(formats):
    """Verifica que un aborto numérico indica la capa que falló."""

    class FailingService:
        strategy = ExecutionMode.DIRECT

        def calibrate_layer(self, *args, **kwargs):
            raise NumericalAbort("non-finite update", column=3)

    graph, weights, samples = fixture_parts("mlp", seed=11)
    with pytest.raises(NumericalAbort) as info:
        GraphManager(graph, weights, samples, FailingService()).calibrate(formats.get("mxint4"))
    assert info.value.layer == "fc1"
    assert str(info.value) == "non-finite update (layer=fc1, column=3)"


def test_calibration_is_deterministic(formats):
    """Verifica que dos calibraciones idénticas producen el mismo informe."""
    graph, weights, samples = fixture_parts("fig1", seed=12, sizes=[8], num_samples=16)
    first = calibrate_model(graph, weights, samples, formats.resolve("mxfp4", 4))
    second = calibrate_model(graph, weights, samples, formats.resolve("mxfp4", 4))
    assert first.report.to_dict() == second.report.to_dict()
    for name in first.quantized:
        assert np.array_equal(first.weights[name], second.weights[name])


# ==================== Tests de fixtures ====================

def test_fixtures_are_deterministic():
    """Verifica que la misma semilla produce el mismo fixture."""
    first = FixtureService(5).generate("mlp")
    second = FixtureService(5).generate("mlp")
    other = FixtureService(6).generate("mlp")
    assert first.model == second.model
    for name in first.weights:
        assert first.weights[name].dtype == np.float32
        assert np.array_equal(first.weights[name], second.weights[name])
    assert np.array_equal(first.samples, second.samples)
    assert not np.array_equal(first.samples, other.samples)


def test_fixture_errors():
    """Verifica los errores de configuración de los fixtures."""
    service = FixtureService()
    with pytest.raises(ConfigError):
        service.generate("cnn")
    with pytest.raises(ConfigError):
        service.generate("mlp", [4, 0])
    with pytest.raises(ConfigError):
        service.generate("mlp", [4])
    with pytest.raises(ConfigError):
        service.generate("fig1", [4, 4])
    with pytest.raises(ConfigError):
        service.generate("mlp", num_samples=0)
