"""
Model graphs and the layer-by-layer calibration driver.

A model is a DAG of nodes: one ``input`` node, ``linear`` layers
(X Wᵀ + b), ``elementwise`` nonlinearities and ``add`` joins. Two traces are
kept while calibrating: the original trace A, computed once with the original
weights, and the quantized-model trace Â, recomputed downstream of every layer
as soon as that layer is finalized.
"""
import json
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from ..services.diffusion_service import DiffusionService, ExecutionMode, QuantizePolicy
from ..services.format_service import BlockFormat, QuantizedTensor, format_to_dict, quantize_tensor
from ..services.metrics_service import CalibReport, LayerReport, layer_errors, memory_footprint
from ..utils.errors import ArtifactIOError, GraphError, NumericalAbort, ShapeError
from ..utils.kernels import matmul, squared_l2
from ..utils.settings import ED_DEFAULT_SEED, get_logger

logger = get_logger()

ActivationTrace = Dict[str, np.ndarray]


class NodeKind(str, Enum):
    INPUT = "input"
    LINEAR = "linear"
    ELEMENTWISE = "elementwise"
    ADD = "add"


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


ACTIVATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "relu": lambda x: np.maximum(x, 0.0),
    "gelu": _gelu,
    "identity": lambda x: x.copy(),
}


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: NodeKind
    inputs: Tuple[str, ...] = ()
    weight: Optional[str] = None
    bias: Optional[str] = None
    function: Optional[str] = None
    policy: QuantizePolicy = QuantizePolicy.QUANTIZE
    width: Optional[int] = None

    @classmethod
    def from_dict(cls, data: dict) -> "LayerNode":
        try:
            return cls(
                id=str(data["id"]),
                kind=NodeKind(data["kind"]),
                inputs=tuple(data.get("inputs", ())),
                weight=data.get("weight"),
                bias=data.get("bias"),
                function=data.get("function"),
                policy=QuantizePolicy(data.get("policy", QuantizePolicy.QUANTIZE.value)),
                width=data.get("width"),
            )
        except KeyError as e:
            raise GraphError(f"node is missing field {e}") from e
        except ValueError as e:
            raise GraphError(f"invalid node {data.get('id', '?')}: {e}") from e

    def to_dict(self) -> dict:
        data = {"id": self.id, "kind": self.kind.value, "inputs": list(self.inputs)}
        if self.kind == NodeKind.LINEAR:
            data["weight"] = self.weight
            data["policy"] = self.policy.value
            if self.bias is not None:
                data["bias"] = self.bias
        if self.function is not None:
            data["function"] = self.function
        if self.width is not None:
            data["width"] = self.width
        return data


@dataclass
class ModelGraph:
    """DAG of layers with a designated input and output node."""

    nodes: Dict[str, LayerNode]
    input: str
    output: str
    order: List[str] = field(default_factory=list, init=False)

    def __post_init__(self):
        self._validate()
        self.order = topological_order(self)
        unreachable = set(self.nodes) - self.descendants(self.input) - {self.input}
        if unreachable:
            raise GraphError(f"nodes not reachable from '{self.input}': {', '.join(sorted(unreachable))}")

    def _validate(self):
        for name in (self.input, self.output):
            if name not in self.nodes:
                raise GraphError(f"unknown node '{name}'")
        if self.nodes[self.input].kind != NodeKind.INPUT:
            raise GraphError(f"'{self.input}' is not an input node")

        for node in self.nodes.values():
            for src in node.inputs:
                if src not in self.nodes:
                    raise GraphError(f"node '{node.id}' reads unknown node '{src}'")
            if node.kind == NodeKind.INPUT:
                if node.inputs or not isinstance(node.width, int) or node.width < 1:
                    raise GraphError(f"input node '{node.id}' needs a positive width and no inputs")
                if node.id != self.input:
                    raise GraphError(f"only one input node is supported, found '{node.id}'")
            elif node.kind == NodeKind.LINEAR:
                if len(node.inputs) != 1 or not node.weight:
                    raise GraphError(f"linear node '{node.id}' needs one input and a weight name")
            elif node.kind == NodeKind.ELEMENTWISE:
                if len(node.inputs) != 1 or node.function not in ACTIVATIONS:
                    raise GraphError(
                        f"elementwise node '{node.id}' needs one input and a function in {sorted(ACTIVATIONS)}"
                    )
            elif len(node.inputs) < 2:
                raise GraphError(f"add node '{node.id}' needs at least two inputs")

    @classmethod
    def from_dict(cls, data: dict) -> "ModelGraph":
        try:
            raw_nodes = data["nodes"]
            nodes: Dict[str, LayerNode] = {}
            for entry in raw_nodes:
                node = LayerNode.from_dict(entry)
                if node.id in nodes:
                    raise GraphError(f"duplicate node id '{node.id}'")
                nodes[node.id] = node
            return cls(nodes=nodes, input=data["input"], output=data["output"])
        except (KeyError, TypeError) as e:
            raise GraphError(f"malformed model description: {e}") from e

    def to_dict(self) -> dict:
        return {
            "input": self.input,
            "output": self.output,
            "nodes": [node.to_dict() for node in self.nodes.values()],
        }

    @classmethod
    def load(cls, path) -> "ModelGraph":
        path = Path(path)
        if not path.exists():
            raise ArtifactIOError(f"file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ArtifactIOError(f"unreadable model description {path}: {e}") from e
        return cls.from_dict(data)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def consumers(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {name: [] for name in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                if node.id not in out[src]:
                    out[src].append(node.id)
        return out

    def descendants(self, node_id: str) -> Set[str]:
        """Every node that reads ``node_id``'s output, directly or not."""
        consumers = self.consumers()
        seen: Set[str] = set()
        pending = deque(consumers[node_id])
        while pending:
            current = pending.popleft()
            if current not in seen:
                seen.add(current)
                pending.extend(consumers[current])
        return seen

    def linear_nodes(self) -> List[LayerNode]:
        return [self.nodes[n] for n in self.order if self.nodes[n].kind == NodeKind.LINEAR]


def topological_order(graph: ModelGraph) -> List[str]:
    """Kahn's algorithm; ties resolved by declaration order."""
    indegree = {name: len(set(node.inputs)) for name, node in graph.nodes.items()}
    consumers = graph.consumers()
    position = {name: i for i, name in enumerate(graph.nodes)}

    ready = sorted((n for n, d in indegree.items() if d == 0), key=position.get)
    order: List[str] = []
    while ready:
        current = ready.pop(0)
        order.append(current)
        for nxt in consumers[current]:
            indegree[nxt] -= 1
            if indegree[nxt] == 0:
                ready.append(nxt)
                ready.sort(key=position.get)

    if len(order) != len(graph.nodes):
        stuck = sorted(set(graph.nodes) - set(order))
        raise GraphError(f"cycle detected among nodes: {', '.join(stuck)}")
    return order


# ==================== Forward passes ====================

def _tensor(weights: Dict[str, np.ndarray], name: str) -> np.ndarray:
    if name not in weights:
        raise ArtifactIOError(f"tensor '{name}' missing from weights")
    return np.asarray(weights[name], dtype=np.float64)


def linear_input(graph: ModelGraph, trace: ActivationTrace, node_id: str,
                 activation_quant: Optional[BlockFormat] = None) -> np.ndarray:
    """Input the linear node consumes, quantized along IFM when activation quantization is on."""
    X = trace[graph.nodes[node_id].inputs[0]]
    if activation_quant is None:
        return X
    return quantize_tensor(X, activation_quant, axis=1).dequantize()


def _evaluate(graph: ModelGraph, node: LayerNode, weights: Dict[str, np.ndarray],
              trace: ActivationTrace, activation_quant: Optional[BlockFormat]) -> np.ndarray:
    if node.kind == NodeKind.LINEAR:
        X = linear_input(graph, trace, node.id, activation_quant)
        W = _tensor(weights, node.weight)
        if W.ndim != 2 or W.shape[1] != X.shape[1]:
            raise ShapeError(f"node '{node.id}': weight {W.shape} does not fit input width {X.shape[1]}")
        out = matmul(X, W.T)
        if node.bias is not None:
            bias = _tensor(weights, node.bias)
            if bias.shape != (W.shape[0],):
                raise ShapeError(f"node '{node.id}': bias {bias.shape} does not match OFM {W.shape[0]}")
            out = out + bias
        return out

    if node.kind == NodeKind.ELEMENTWISE:
        return ACTIVATIONS[node.function](trace[node.inputs[0]])

    shapes = {trace[src].shape for src in node.inputs}
    if len(shapes) != 1:
        raise ShapeError(f"add node '{node.id}' joins different shapes {sorted(shapes)}")
    out = trace[node.inputs[0]].copy()
    for src in node.inputs[1:]:
        out = out + trace[src]
    return out


def forward(graph: ModelGraph, weights: Dict[str, np.ndarray], samples,
            activation_quant: Optional[BlockFormat] = None) -> ActivationTrace:
    """Output of every node for the stacked samples (M x input width)."""
    samples = np.asarray(samples, dtype=np.float64)
    width = graph.nodes[graph.input].width
    if samples.ndim != 2 or samples.shape[1] != width:
        raise ShapeError(f"samples {samples.shape} do not match input width {width}")
    if samples.shape[0] == 0:
        raise ShapeError("no calibration samples")

    trace: ActivationTrace = {graph.input: samples}
    for node_id in graph.order:
        node = graph.nodes[node_id]
        if node.kind != NodeKind.INPUT:
            trace[node_id] = _evaluate(graph, node, weights, trace, activation_quant)
    return trace


def forward_from(graph: ModelGraph, weights: Dict[str, np.ndarray], trace: ActivationTrace,
                 changed: str, activation_quant: Optional[BlockFormat] = None) -> ActivationTrace:
    """New trace with ``changed`` and everything downstream of it recomputed."""
    stale = graph.descendants(changed) | {changed}
    updated = dict(trace)
    for node_id in graph.order:
        if node_id in stale and graph.nodes[node_id].kind != NodeKind.INPUT:
            updated[node_id] = _evaluate(graph, graph.nodes[node_id], weights, updated, activation_quant)
    return updated


# ==================== Calibration ====================

@dataclass
class CalibrationOptions:
    mode: str = "ed"
    calibrate_unquantized: bool = False
    quantize_activations: bool = False
    strategy: Optional[ExecutionMode] = None
    seed: int = ED_DEFAULT_SEED


@dataclass
class CalibrationOutcome:
    weights: Dict[str, np.ndarray]
    quantized: Dict[str, QuantizedTensor]
    calibrated: Set[str]
    report: CalibReport


def config_echo(graph: ModelGraph, fmt: BlockFormat, options: CalibrationOptions, strategy: ExecutionMode) -> dict:
    """Run configuration as stored in the report."""
    return {
        "format": format_to_dict(fmt),
        "format_name": fmt.name,
        "block_size": fmt.block_size,
        "mode": options.mode,
        "strategy": ExecutionMode(strategy).value,
        "calibrate_unquantized": options.calibrate_unquantized,
        "quantize_activations": options.quantize_activations,
        "seed": options.seed,
        "policies": {n.id: n.policy.value for n in graph.linear_nodes()},
    }


def layer_report(node: LayerNode, action: str, A, A_hat, W, W_hat, fmt: BlockFormat,
                 zero_norm_columns: int = 0, scale_clamps: int = 0, rescales: int = 0) -> LayerReport:
    """Report row for one linear layer; RTN error only for layers that were quantized."""
    quantizing = node.policy == QuantizePolicy.QUANTIZE and action != "none"
    errors = layer_errors(A, A_hat, W, W_hat, fmt if quantizing else None)
    m, (ofm, ifm) = A.shape[0], W.shape
    return LayerReport(
        layer=node.id,
        weight=node.weight,
        policy=node.policy.value,
        action=action,
        m=m,
        ifm=ifm,
        ofm=ofm,
        error_before=errors.before,
        error_after=errors.after,
        rtn_error=errors.rtn,
        zero_norm_columns=zero_norm_columns,
        scale_clamps=scale_clamps,
        rescales=rescales,
        direct_bytes=memory_footprint(m, ofm, ifm, fmt.block_size, ExecutionMode.DIRECT.value),
        low_memory_bytes=memory_footprint(m, ofm, ifm, fmt.block_size, ExecutionMode.LOW_MEMORY.value),
    )


class GraphManager:
    """Owns the two activation traces and drives calibration in topological order."""

    def __init__(self, graph: ModelGraph, weights: Dict[str, np.ndarray], samples,
                 service: Optional[DiffusionService] = None):
        self.graph = graph
        self.weights = weights
        self.samples = np.asarray(samples, dtype=np.float64)
        self.service = service
        self.original_trace: Optional[ActivationTrace] = None
        self.quantized_trace: Optional[ActivationTrace] = None

    def calibrate(self, fmt: BlockFormat, options: Optional[CalibrationOptions] = None) -> CalibrationOutcome:
        options = options or CalibrationOptions()
        service = self.service or DiffusionService(options.strategy)
        act_fmt = fmt if options.quantize_activations else None

        self.original_trace = forward(self.graph, self.weights, self.samples)
        self.quantized_trace = forward(self.graph, self.weights, self.samples, act_fmt)

        current = dict(self.weights)
        quantized: Dict[str, QuantizedTensor] = {}
        calibrated: Set[str] = set()
        layers: List[LayerReport] = []

        for node in self.graph.linear_nodes():
            A = self.original_trace[node.inputs[0]]
            A_hat = linear_input(self.graph, self.quantized_trace, node.id, act_fmt)
            W = _tensor(self.weights, node.weight)
            logger.info(f"Calibrating layer {node.id} ({node.policy.value}, W {W.shape[0]}x{W.shape[1]}, M {A.shape[0]})")

            try:
                result = service.calibrate_layer(
                    W, A, A_hat, fmt,
                    method=options.mode,
                    policy=node.policy,
                    calibrate_unquantized=options.calibrate_unquantized,
                )
            except NumericalAbort as e:
                e.layer = node.id
                raise

            if result is None:
                action, W_hat = "none", W
            else:
                action = options.mode if node.policy == QuantizePolicy.QUANTIZE else "update_only"
                W_hat = result.weights
                current[node.weight] = W_hat
                calibrated.add(node.weight)
                if result.quantized is not None:
                    quantized[node.weight] = result.quantized
                self.quantized_trace = forward_from(self.graph, current, self.quantized_trace, node.id, act_fmt)
                logger.info(f"Layer {node.id}: error {result.error_before:.6g} -> {result.error_after:.6g} "
                            f"in {result.wall_time:.3f}s")
                if result.zero_norm_count:
                    logger.warning(f"Layer {node.id}: {result.zero_norm_count} zero-norm input columns, "
                                   f"correction skipped at {result.zero_norm_columns}")
                if result.scale_clamps or result.rescales:
                    logger.warning(f"Layer {node.id}: {result.scale_clamps} scale clamps, "
                                   f"{result.rescales} in-block rescales")

            layers.append(layer_report(
                node, action, A, A_hat, W, W_hat, fmt,
                zero_norm_columns=result.zero_norm_count if result else 0,
                scale_clamps=result.scale_clamps if result else 0,
                rescales=result.rescales if result else 0,
            ))

        output = self.graph.output
        report = CalibReport(
            config=config_echo(self.graph, fmt, options, service.strategy),
            layers=layers,
            end_to_end_error=squared_l2(self.original_trace[output] - self.quantized_trace[output]),
        )
        logger.info(f"End-to-end squared error: {report.end_to_end_error:.6g}")
        return CalibrationOutcome(weights=current, quantized=quantized, calibrated=calibrated, report=report)


def calibrate_model(graph: ModelGraph, weights: Dict[str, np.ndarray], samples, fmt: BlockFormat,
                    options: Optional[CalibrationOptions] = None) -> CalibrationOutcome:
    return GraphManager(graph, weights, samples).calibrate(fmt, options)
