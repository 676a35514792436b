"""Command implementations behind main.py."""
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..services.diffusion_service import DiffusionService, ExecutionMode, QuantizePolicy
from ..services.fixture_service import SAMPLES_TENSOR, FixtureService
from ..services.format_service import (
    BlockFormat,
    ElementFormat,
    FormatService,
    block_values,
    enumerate_values,
    format_from_dict,
    format_stats,
)
from ..services.metrics_service import CalibReport, LayerReport
from ..utils.errors import ArtifactIOError, ArtifactMismatch, ConfigError
from ..utils.kernels import squared_l2
from ..utils.settings import ED_DEFAULT_FORMAT, ED_DEFAULT_SEED, get_logger
from ..utils.tensorio import read_container, read_quantized, write_container, write_quantized
from .graph_manager import (
    CalibrationOptions,
    GraphManager,
    ModelGraph,
    config_echo,
    forward,
    layer_report,
    linear_input,
)

logger = get_logger()

REPORT_TOLERANCE = 1e-12


@dataclass
class RunConfig:
    model: Path
    weights: Path
    samples: Path
    format: str = ED_DEFAULT_FORMAT
    block_size: Optional[int] = None
    mode: str = "ed"
    calibrate_unquantized: bool = False
    quantize_activations: bool = False
    seed: int = ED_DEFAULT_SEED
    out_weights: Optional[Path] = None
    out_report: Optional[Path] = None
    strategy: Optional[str] = None


def weight_paths(prefix) -> Tuple[Path, Path]:
    """``P`` -> (P.tcq, P.tct)."""
    prefix = Path(prefix)
    return prefix.with_name(prefix.name + ".tcq"), prefix.with_name(prefix.name + ".tct")


def load_samples(path) -> np.ndarray:
    tensors = read_container(path)
    if SAMPLES_TENSOR not in tensors:
        raise ArtifactIOError(f"{path} has no '{SAMPLES_TENSOR}' tensor")
    return tensors[SAMPLES_TENSOR]


def load_final_weights(prefix) -> Dict[str, np.ndarray]:
    """Full-precision tensors from P.tct merged with dequantized tensors from P.tcq."""
    tcq, tct = weight_paths(prefix)
    weights = read_container(tct)
    for name, qt in read_quantized(tcq).items():
        if name in weights:
            raise ArtifactIOError(f"tensor '{name}' stored in both {tct} and {tcq}")
        weights[name] = qt.dequantize()
    return weights


class RunManager:
    """Runs the quantize, formats, eval and gen-fixture commands."""

    def __init__(self, format_service: Optional[FormatService] = None):
        self.format_service = format_service or FormatService()

    def resolve_format(self, name: str, block_size: Optional[int] = None) -> BlockFormat:
        if block_size is not None and block_size < 1:
            raise ConfigError("--block-size must be positive")
        return self.format_service.resolve(name, block_size)

    # ==================== quantize ====================

    def cmd_quantize(self, config: RunConfig) -> CalibReport:
        if config.mode not in DiffusionService.METHODS:
            raise ConfigError(f"unknown mode '{config.mode}'")
        fmt = self.resolve_format(config.format, config.block_size)
        graph = ModelGraph.load(config.model)
        weights = read_container(config.weights)
        samples = load_samples(config.samples)
        logger.info(f"Quantizing {config.model} to {fmt.name} ({fmt.bits_per_value:g} bits/value), mode {config.mode}")

        strategy = ExecutionMode(config.strategy) if config.strategy else None
        options = CalibrationOptions(
            mode=config.mode,
            calibrate_unquantized=config.calibrate_unquantized,
            quantize_activations=config.quantize_activations,
            strategy=strategy,
            seed=config.seed,
        )
        outcome = GraphManager(graph, weights, samples, DiffusionService(strategy)).calibrate(fmt, options)

        if config.out_weights is not None:
            tcq, tct = weight_paths(config.out_weights)
            full_precision = {}
            for name, data in outcome.weights.items():
                if name in outcome.quantized:
                    continue
                # calibrated tensors are float64; untouched ones keep their stored dtype
                full_precision[name] = data if name in outcome.calibrated else weights[name]
            write_quantized(tcq, outcome.quantized)
            write_container(tct, full_precision)
            logger.info(f"Weights written to {tcq} and {tct}")
        if config.out_report is not None:
            outcome.report.save(config.out_report)
        return outcome.report

    # ==================== formats ====================

    def cmd_formats(self, name: Optional[str] = None) -> str:
        if name is None:
            return self._registry_table().to_string(index=False)

        fmt = self.format_service.get(name)
        stats = format_stats(fmt)
        values = enumerate_values(fmt) if isinstance(fmt, ElementFormat) else block_values(fmt)
        lines = [
            f"format: {name}",
            f"bits per value: {stats.bits_per_value:g}",
            f"dynamic range: {stats.dynamic_range:g}",
            f"precision: {stats.precision:g}",
            f"alphabet size: {stats.alphabet_size}",
            f"max value: {stats.max_value:g}",
            f"min nonzero value: {stats.min_nonzero_value:g}",
            f"{stats.unique_value_count} unique values:",
            ", ".join(f"{v:g}" for v in values),
        ]
        return "\n".join(lines)

    def _registry_table(self) -> pd.DataFrame:
        rows = []
        for name in self.format_service.names():
            fmt = self.format_service.get(name)
            stats = format_stats(fmt)
            rows.append({
                "name": name,
                "kind": "element" if isinstance(fmt, ElementFormat) else "block",
                "block_size": 1 if isinstance(fmt, ElementFormat) else fmt.block_size,
                "bits_per_value": stats.bits_per_value,
                "unique_values": stats.unique_value_count,
                "dynamic_range": stats.dynamic_range,
                "max_value": stats.max_value,
            })
        return pd.DataFrame(rows)

    # ==================== eval ====================

    def cmd_eval(
        self,
        model,
        weights,
        quantized,
        samples,
        report: Optional[Path] = None,
        out_report: Optional[Path] = None,
        config: Optional[RunConfig] = None,
    ) -> CalibReport:
        """
        Recompute the report from artifacts: original weights, ``quantized``
        prefix (P.tcq + P.tct) and samples. The run configuration comes from the
        stored report when one is given, otherwise from ``config``.
        """
        graph = ModelGraph.load(model)
        stored = CalibReport.load(report) if report is not None else None
        run = self._eval_config(graph, stored, config)
        fmt = format_from_dict(run["format"])

        original = read_container(weights)
        final = load_final_weights(quantized)
        data = load_samples(samples)

        act_fmt = fmt if run["quantize_activations"] else None
        a_trace = forward(graph, original, data)
        a_hat_trace = forward(graph, final, data, act_fmt)
        quantized_names = set(read_quantized(weight_paths(quantized)[0]))
        previous = {l.layer: l for l in stored.layers} if stored else {}

        layers: List[LayerReport] = []
        for node in graph.linear_nodes():
            A = a_trace[node.inputs[0]]
            A_hat = linear_input(graph, a_hat_trace, node.id, act_fmt)
            W = np.asarray(original[node.weight], dtype=np.float64)
            W_hat = np.asarray(final[node.weight], dtype=np.float64)
            action = self._eval_action(node, run, node.weight in quantized_names)
            # event counters are run diagnostics; they are carried over, not recomputed
            events = previous.get(node.id)
            layers.append(layer_report(
                node, action, A, A_hat, W, W_hat, fmt,
                zero_norm_columns=events.zero_norm_columns if events else 0,
                scale_clamps=events.scale_clamps if events else 0,
                rescales=events.rescales if events else 0,
            ))

        recomputed = CalibReport(
            config=run,
            layers=layers,
            end_to_end_error=squared_l2(a_trace[graph.output] - a_hat_trace[graph.output]),
        )
        print(self.comparison_table(recomputed).to_string(index=False))

        if out_report is not None:
            recomputed.save(out_report)
        if stored is not None:
            problems = stored.compare(recomputed, REPORT_TOLERANCE)
            if problems:
                for problem in problems:
                    logger.error(f"Mismatch: {problem}")
                raise ArtifactMismatch(f"{len(problems)} report fields do not match the artifacts")
            logger.info(f"Report {report} matches the artifacts")
        return recomputed

    def _eval_config(self, graph: ModelGraph, stored: Optional[CalibReport], config: Optional[RunConfig]) -> dict:
        if stored is not None:
            return stored.config
        if config is None:
            raise ConfigError("eval needs a stored report or a format")
        fmt = self.resolve_format(config.format, config.block_size)
        options = CalibrationOptions(
            mode=config.mode,
            calibrate_unquantized=config.calibrate_unquantized,
            quantize_activations=config.quantize_activations,
            seed=config.seed,
        )
        return config_echo(graph, fmt, options, DiffusionService(config.strategy).strategy)

    @staticmethod
    def _eval_action(node, run: dict, is_quantized: bool) -> str:
        if is_quantized:
            return run["mode"]
        if node.policy == QuantizePolicy.CALIBRATE_ONLY and run["calibrate_unquantized"] and run["mode"] == "ed":
            return "update_only"
        return "none"

    @staticmethod
    def comparison_table(report: CalibReport) -> pd.DataFrame:
        frame = report.to_frame()
        return frame[["layer", "policy", "action", "error_before", "error_after", "rtn_error"]].rename(
            columns={"error_before": "uncalibrated", "error_after": "calibrated", "rtn_error": "rtn"}
        )

    # ==================== gen-fixture ====================

    def cmd_gen_fixture(self, kind: str, out_dir, seed: int = ED_DEFAULT_SEED,
                        sizes: Optional[Sequence[int]] = None,
                        num_samples: int = FixtureService.DEFAULT_SAMPLES) -> Dict[str, Path]:
        service = FixtureService(seed)
        return service.write(service.generate(kind, sizes, num_samples), out_dir)
