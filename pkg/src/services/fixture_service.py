"""Deterministic synthetic models for tests and demos."""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..utils.errors import ConfigError
from ..utils.settings import ED_DEFAULT_SEED, get_logger
from ..utils.tensorio import write_container

logger = get_logger()

SAMPLES_TENSOR = "samples"


@dataclass(eq=False)
class Fixture:
    model: dict
    weights: Dict[str, np.ndarray]
    samples: np.ndarray


class FixtureService:
    """Random Gaussian models: weights N(0, 1/fan_in), samples N(0, 1), stored as float32."""

    KINDS = ("mlp", "fig1")
    DEFAULT_SIZES = {"mlp": [16, 32, 32, 8], "fig1": [16]}
    DEFAULT_SAMPLES = 64

    def __init__(self, seed: int = ED_DEFAULT_SEED):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def generate(self, kind: str, sizes: Optional[Sequence[int]] = None,
                 num_samples: int = DEFAULT_SAMPLES) -> Fixture:
        if kind not in self.KINDS:
            raise ConfigError(f"unknown fixture kind '{kind}' (expected one of {', '.join(self.KINDS)})")
        sizes = list(sizes) if sizes else self.DEFAULT_SIZES[kind]
        if any(int(s) < 1 for s in sizes) or num_samples < 1:
            raise ConfigError(f"fixture sizes and sample count must be positive, got {sizes} and {num_samples}")
        if kind == "mlp":
            return self.mlp(sizes, num_samples)
        if len(sizes) != 1:
            raise ConfigError("the fig1 fixture takes a single width")
        return self.fig1(sizes[0], num_samples)

    def _linear(self, weights: Dict[str, np.ndarray], name: str, fan_out: int, fan_in: int):
        weights[f"{name}.weight"] = self.rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)).astype(np.float32)
        weights[f"{name}.bias"] = self.rng.normal(0.0, 0.1, size=fan_out).astype(np.float32)

    @staticmethod
    def _linear_node(name: str, src: str, policy: str = "quantize") -> dict:
        return {
            "id": name,
            "kind": "linear",
            "inputs": [src],
            "weight": f"{name}.weight",
            "bias": f"{name}.bias",
            "policy": policy,
        }

    def _samples(self, num_samples: int, width: int) -> np.ndarray:
        return self.rng.normal(0.0, 1.0, size=(num_samples, width)).astype(np.float32)

    def mlp(self, sizes: List[int], num_samples: int) -> Fixture:
        """Linear layers with ReLU in between; the last layer is calibrate-only."""
        if len(sizes) < 2:
            raise ConfigError("an mlp fixture needs at least an input and an output width")
        weights: Dict[str, np.ndarray] = {}
        nodes = [{"id": "x", "kind": "input", "inputs": [], "width": int(sizes[0])}]
        src = "x"
        n_layers = len(sizes) - 1
        for i in range(n_layers):
            name = f"fc{i + 1}"
            self._linear(weights, name, int(sizes[i + 1]), int(sizes[i]))
            last = i == n_layers - 1
            nodes.append(self._linear_node(name, src, "calibrate_only" if last and n_layers > 1 else "quantize"))
            src = name
            if not last:
                nodes.append({"id": f"relu{i + 1}", "kind": "elementwise", "inputs": [name], "function": "relu"})
                src = f"relu{i + 1}"

        model = {"input": "x", "output": src, "nodes": nodes}
        return Fixture(model=model, weights=weights, samples=self._samples(num_samples, int(sizes[0])))

    def fig1(self, width: int, num_samples: int) -> Fixture:
        """x -> f1 -> relu -> f2, then f3 = f2 + relu(f1) and f4 on top."""
        weights: Dict[str, np.ndarray] = {}
        for name in ("f1", "f2", "f4"):
            self._linear(weights, name, width, width)
        nodes = [
            {"id": "x", "kind": "input", "inputs": [], "width": int(width)},
            self._linear_node("f1", "x"),
            {"id": "r1", "kind": "elementwise", "inputs": ["f1"], "function": "relu"},
            self._linear_node("f2", "r1"),
            {"id": "f3", "kind": "add", "inputs": ["f2", "r1"]},
            self._linear_node("f4", "f3"),
        ]
        model = {"input": "x", "output": "f4", "nodes": nodes}
        return Fixture(model=model, weights=weights, samples=self._samples(num_samples, int(width)))

    def write(self, fixture: Fixture, out_dir) -> Dict[str, Path]:
        """Write model.json, weights.tct and samples.tct into ``out_dir``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {
            "model": out_dir / "model.json",
            "weights": out_dir / "weights.tct",
            "samples": out_dir / "samples.tct",
        }
        paths["model"].write_text(json.dumps(fixture.model, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_container(paths["weights"], fixture.weights)
        write_container(paths["samples"], {SAMPLES_TENSOR: fixture.samples})
        logger.info(f"Fixture written to {out_dir}")
        return paths
