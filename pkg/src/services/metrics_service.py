"""
Quality and resource metrics, plus the calibration report.

Errors are squared l2 norms accumulated in float64. Reports carry no timing
so identical runs give byte-identical files.
"""
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional

import numpy as np
import pandas as pd

from ..utils.errors import ArtifactIOError, ConfigError, ShapeError
from ..utils.kernels import matmul, squared_l2
from ..utils.settings import ED_BYTES_PER_VALUE, get_logger
from .format_service import BlockFormat, quantize_tensor

logger = get_logger()

REPORT_VERSION = 1


class LayerErrors(NamedTuple):
    before: float
    after: float
    rtn: Optional[float]


def layer_output_error(A, W, A_hat, W_hat) -> float:
    """||A Wᵀ - Â Ŵᵀ||²."""
    A = np.asarray(A, dtype=np.float64)
    A_hat = np.asarray(A_hat, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    if A.shape != A_hat.shape or W.shape != W_hat.shape:
        raise ShapeError(f"shape mismatch: A {A.shape}, Â {A_hat.shape}, W {W.shape}, Ŵ {W_hat.shape}")
    return squared_l2(matmul(A, W.T) - matmul(A_hat, W_hat.T))


def layer_errors(A, A_hat, W, W_hat, fmt: Optional[BlockFormat] = None) -> LayerErrors:
    """Error of the untouched layer, of the calibrated layer and of plain RTN on the same inputs."""
    rtn = None
    if fmt is not None:
        rtn = layer_output_error(A, W, A_hat, quantize_tensor(W, fmt, axis=1).dequantize())
    return LayerErrors(
        before=layer_output_error(A, W, A_hat, W),
        after=layer_output_error(A, W, A_hat, W_hat),
        rtn=rtn,
    )


def normalized_metric(quantized: float, baseline: float) -> float:
    """Task metric of the quantized model divided by the full-precision one."""
    if baseline == 0:
        raise ConfigError("baseline metric is zero")
    return quantized / baseline


def memory_footprint(m: int, ofm: int, ifm: int, block_size: int, strategy: str,
                     bytes_per_value: int = ED_BYTES_PER_VALUE) -> int:
    """
    Accumulator bytes for one layer.

    ``direct`` stores Õ, U and the in-block sum: 3 x M x OFM values.
    ``low_memory`` stores the per-column projections: block_size x OFM values.
    """
    for name, value in (("M", m), ("OFM", ofm), ("IFM", ifm), ("block_size", block_size),
                        ("bytes_per_value", bytes_per_value)):
        if int(value) < 1:
            raise ConfigError(f"{name} must be positive, got {value}")
    # plain ints do not overflow
    if strategy == "direct":
        return 3 * int(m) * int(ofm) * int(bytes_per_value)
    if strategy == "low_memory":
        return int(block_size) * int(ofm) * int(bytes_per_value)
    raise ConfigError(f"unknown execution mode '{strategy}'")


def bits_per_weight(fmt: BlockFormat) -> float:
    return fmt.element.width + fmt.scale.width / fmt.block_size


# ==================== Report ====================

@dataclass
class LayerReport:
    layer: str
    weight: str
    policy: str
    action: str
    m: int
    ifm: int
    ofm: int
    error_before: float
    error_after: float
    rtn_error: Optional[float] = None
    zero_norm_columns: int = 0
    scale_clamps: int = 0
    rescales: int = 0
    direct_bytes: int = 0
    low_memory_bytes: int = 0


@dataclass
class CalibReport:
    config: Dict[str, Any]
    layers: List[LayerReport] = field(default_factory=list)
    end_to_end_error: float = 0.0
    version: int = REPORT_VERSION

    @property
    def memory(self) -> Dict[str, int]:
        """Peak accumulator bytes over all calibrated layers."""
        return {
            "direct_bytes": max((l.direct_bytes for l in self.layers), default=0),
            "low_memory_bytes": max((l.low_memory_bytes for l in self.layers), default=0),
        }

    def layer(self, name: str) -> LayerReport:
        for entry in self.layers:
            if entry.layer == name:
                return entry
        raise KeyError(name)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "config": self.config,
            "layers": [asdict(l) for l in self.layers],
            "end_to_end_error": self.end_to_end_error,
            "memory": self.memory,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CalibReport":
        try:
            return cls(
                config=data["config"],
                layers=[LayerReport(**entry) for entry in data["layers"]],
                end_to_end_error=float(data["end_to_end_error"]),
                version=int(data.get("version", REPORT_VERSION)),
            )
        except (KeyError, TypeError) as e:
            raise ArtifactIOError(f"malformed report: {e}") from e

    def to_frame(self) -> pd.DataFrame:
        columns = [f.name for f in fields(LayerReport)]
        return pd.DataFrame([asdict(l) for l in self.layers], columns=columns)

    def save(self, path):
        """Write the report as JSON and the per-layer table as a sibling CSV."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        self.to_frame().to_csv(path.with_suffix(".csv"), index=False)
        logger.info(f"Report saved to {path}")

    @classmethod
    def load(cls, path) -> "CalibReport":
        path = Path(path)
        if not path.exists():
            raise ArtifactIOError(f"file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ArtifactIOError(f"unreadable report {path}: {e}") from e
        return cls.from_dict(data)

    def compare(self, other: "CalibReport", tol: float = 1e-12) -> List[str]:
        """Fields that differ from ``other``; floats compare within tol x max(1, |x|)."""
        problems: List[str] = []
        if not _close(self.end_to_end_error, other.end_to_end_error, tol):
            problems.append(f"end_to_end_error: {self.end_to_end_error!r} != {other.end_to_end_error!r}")

        mine = {l.layer: l for l in self.layers}
        theirs = {l.layer: l for l in other.layers}
        for name in sorted(set(mine) | set(theirs)):
            if name not in mine or name not in theirs:
                problems.append(f"{name}: present in only one report")
                continue
            for f in fields(LayerReport):
                a, b = getattr(mine[name], f.name), getattr(theirs[name], f.name)
                if not _close(a, b, tol):
                    problems.append(f"{name}.{f.name}: {a!r} != {b!r}")
        return problems


def _close(a, b, tol: float) -> bool:
    if isinstance(a, float) or isinstance(b, float):
        if a is None or b is None:
            return a is b
        return math.isclose(a, b, rel_tol=0.0, abs_tol=tol * max(1.0, abs(a)))
    return a == b
