"""
Error diffusion calibration of a single linear layer.

For a layer with original input A (M x IFM), quantized-model input Â and
weights W (OFM x IFM), the inherited error is Õ = (A - Â) Wᵀ. Columns are
processed in natural order; each one absorbs its share of Õ plus the error
left over by the columns before it, projected onto Â's matching column.

The scalar path walks one column at a time. The block path walks one block of
columns at a time, keeping one shared power-of-two scale per row-block, and
spreads the block's update over its columns. With block_size 1 both paths
perform the same floating point operations in the same order.

Two accumulator strategies are available:

* DIRECT keeps Õ and the running update U as M x OFM matrices.
* LOW_MEMORY never builds an M x OFM matrix: it keeps the Gram matrix ÂᵀÂ,
  the projection ÂᵀÕ and a block_size x OFM matrix of per-column projections
  of the carried update.
"""
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional

import numpy as np

from ..utils.errors import ConfigError, NumericalAbort, ShapeError
from ..utils.kernels import matmul, vecmat
from ..utils.settings import ED_EXECUTION_MODE, get_logger
from .format_service import BlockFormat, QuantizedTensor, block_exponents, quantize_at_exponents, quantize_tensor
from .metrics_service import layer_output_error

logger = get_logger()


class ExecutionMode(str, Enum):
    DIRECT = "direct"
    LOW_MEMORY = "low_memory"


class PassMode(str, Enum):
    QUANTIZE = "quantize"
    UPDATE_ONLY = "update_only"


@dataclass(eq=False)
class CalibState:
    """Per-layer diffusion accumulators. Single owner; mutated by the passes."""

    weights: np.ndarray
    a_hat: np.ndarray
    w_hat: np.ndarray
    block_size: int
    mode: ExecutionMode
    sq_norms: np.ndarray
    inherited: Optional[np.ndarray] = None
    running_update: Optional[np.ndarray] = None
    gram: Optional[np.ndarray] = None
    inherited_projection: Optional[np.ndarray] = None
    carried: Optional[np.ndarray] = None
    carried_projection: Optional[np.ndarray] = None
    current_block: Optional[int] = None
    _share: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def create(cls, W, A, A_hat, block_size: int, mode: ExecutionMode) -> "CalibState":
        W, A, A_hat = _check_layer_shapes(W, A, A_hat)
        if block_size < 1:
            raise ConfigError("block_size must be at least 1")
        # column-major so every Â column is contiguous
        a_hat = np.asfortranarray(A_hat)
        state = cls(
            weights=W,
            a_hat=a_hat,
            w_hat=W.copy(),
            block_size=block_size,
            mode=mode,
            sq_norms=np.array([vecmat(a_hat[:, k], a_hat[:, k][:, None])[0] for k in range(W.shape[1])]),
        )
        if mode == ExecutionMode.DIRECT:
            state.inherited = inherited_error(A, A_hat, W)
            state.running_update = np.zeros_like(state.inherited)
        else:
            state.gram = matmul(a_hat.T, a_hat)
            state.inherited_projection = matmul(matmul(a_hat.T, A - A_hat), W.T)
        return state

    @property
    def ifm(self) -> int:
        return self.weights.shape[1]

    @property
    def ofm(self) -> int:
        return self.weights.shape[0]

    @property
    def alpha(self) -> float:
        """Share of Õ given to one full block: 1 / (IFM / block_size)."""
        return 1.0 / (self.ifm / self.block_size)

    @property
    def n_blocks(self) -> int:
        return -(-self.ifm // self.block_size)

    def block_bounds(self, block: int):
        if not 0 <= block < self.n_blocks:
            raise ShapeError(f"block {block} outside [0, {self.n_blocks})")
        start = block * self.block_size
        return start, min(start + self.block_size, self.ifm)

    def deltas(self, columns) -> np.ndarray:
        """W - Ŵ restricted to ``columns`` (OFM x len)."""
        return self.weights[:, columns] - self.w_hat[:, columns]

    def begin_block(self, block: int):
        """Prepare the carried term Õ share + U_block^(b-1) for ``block``."""
        start, stop = self.block_bounds(block)
        self.current_block = block

        if self.mode == ExecutionMode.DIRECT:
            # a short final block gets a share proportional to its width
            self._share = self.inherited / (self.ifm / (stop - start))
            self.carried = self._share + self.running_update
            return

        projection = self.inherited_projection[start:stop] / (self.ifm / stop)
        if start > 0:
            projection = projection + matmul(self.gram[start:stop, :start], self.deltas(slice(0, start)).T)
        norms = self.sq_norms[start:stop, None]
        self.carried_projection = np.where(norms > 0, projection / np.where(norms > 0, norms, 1.0), 0.0)

    def end_block(self):
        """Fold the realized block error into the running update."""
        start, stop = self.block_bounds(self.current_block)
        if self.mode == ExecutionMode.DIRECT:
            block_error = matmul(self.a_hat[:, start:stop], self.deltas(slice(start, stop)).T)
            self.running_update = self._share + block_error + self.running_update
        self.current_block = None


@dataclass(eq=False)
class LayerCalibResult:
    weights: np.ndarray
    quantized: Optional[QuantizedTensor]
    error_before: float
    error_after: float
    zero_norm_columns: List[int] = field(default_factory=list)
    scale_clamps: int = 0
    rescales: int = 0
    wall_time: float = 0.0

    @property
    def zero_norm_count(self) -> int:
        return len(self.zero_norm_columns)


def _check_layer_shapes(W, A, A_hat):
    W = np.asarray(W, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    A_hat = np.asarray(A_hat, dtype=np.float64)
    if W.ndim != 2 or A.ndim != 2 or A_hat.ndim != 2:
        raise ShapeError("W, A and Â must be matrices")
    if A.shape != A_hat.shape:
        raise ShapeError(f"A {A.shape} and Â {A_hat.shape} differ")
    if A.shape[1] != W.shape[1]:
        raise ShapeError(f"input width {A.shape[1]} does not match weight IFM {W.shape[1]}")
    return W, A, A_hat


def inherited_error(A, A_hat, W) -> np.ndarray:
    """Õ = (A - Â) Wᵀ."""
    W, A, A_hat = _check_layer_shapes(W, A, A_hat)
    return matmul(A - A_hat, W.T)


def _others(state: CalibState, block: int, column: int) -> List[int]:
    if state.current_block != block:
        raise RuntimeError(f"block {block} is not open")
    start, stop = state.block_bounds(block)
    if not start <= column < stop:
        raise ShapeError(f"column {column} is not in block {block}")
    return [k for k in range(start, stop) if k != column]


def l_update_direct(state: CalibState, block: int, column: int) -> np.ndarray:
    """Õ share + U_block^(b-1) + Σ_{k≠l in block} Â_k (W_k - Ŵ_k)ᵀ, as an M x OFM matrix."""
    others = _others(state, block, column)
    update = state.carried
    if others:
        update = update + matmul(state.a_hat[:, others], state.deltas(others).T)
    return update


def l_update_low_memory(state: CalibState, block: int, column: int) -> np.ndarray:
    """Projected update (Â_lᵀ / ||Â_l||²) l_update as a 1 x OFM vector."""
    others = _others(state, block, column)
    norm = state.sq_norms[column]
    if norm == 0:
        return np.zeros(state.ofm)
    start, _ = state.block_bounds(block)
    projected = state.carried_projection[column - start]
    if others:
        projected = projected + vecmat(state.gram[column, others] / norm, state.deltas(others).T)
    return projected


def _projected_step(state: CalibState, block: int, column: int) -> np.ndarray:
    if state.mode == ExecutionMode.DIRECT:
        return vecmat(state.a_hat[:, column], l_update_direct(state, block, column)) / state.sq_norms[column]
    return l_update_low_memory(state, block, column)


def _check_finite(target: np.ndarray, column: int):
    if not np.all(np.isfinite(target)):
        raise NumericalAbort("non-finite update", column=column)


def _finish(W, A, A_hat, state: CalibState, fmt: Optional[BlockFormat], mode: PassMode,
            zero_norm: List[int], clamps: int, rescales: int, started: float) -> LayerCalibResult:
    quantized = None
    if mode == PassMode.QUANTIZE:
        quantized = quantize_tensor(state.w_hat, fmt, axis=1)
        if not np.array_equal(quantized.dequantize(), state.w_hat):
            raise NumericalAbort(f"calibrated weights are not representable in {fmt.name}")

    return LayerCalibResult(
        weights=state.w_hat,
        quantized=quantized,
        error_before=layer_output_error(A, W, A_hat, W),
        error_after=layer_output_error(A, W, A_hat, state.w_hat),
        zero_norm_columns=zero_norm,
        scale_clamps=clamps,
        rescales=rescales,
        wall_time=time.perf_counter() - started,
    )


def _validate_pass(fmt: Optional[BlockFormat], mode: PassMode):
    if mode == PassMode.QUANTIZE and fmt is None:
        raise ConfigError("a quantizing pass needs a format")


def ed_scalar_pass(
    W, A, A_hat,
    fmt: Optional[BlockFormat] = None,
    mode: PassMode = PassMode.QUANTIZE,
    strategy: ExecutionMode = ExecutionMode.LOW_MEMORY,
    observer: Optional[Callable[[int, CalibState], None]] = None,
) -> LayerCalibResult:
    """
    Column-by-column error diffusion.

    In QUANTIZE mode every adjusted column is rounded with a private
    power-of-two scale per value (``fmt`` must have block_size 1). UPDATE_ONLY
    keeps the adjusted columns in full precision. ``observer(k, state)`` runs
    after column k has been folded into the running update.
    """
    _validate_pass(fmt, mode)
    if mode == PassMode.QUANTIZE and fmt.block_size != 1:
        raise ConfigError(f"{fmt.name} has block_size {fmt.block_size}; use ed_block_pass")

    started = time.perf_counter()
    state = CalibState.create(W, A, A_hat, block_size=1, mode=strategy)
    W, A, A_hat = state.weights, np.asarray(A, dtype=np.float64), np.asarray(A_hat, dtype=np.float64)
    zero_norm: List[int] = []
    clamps = 0

    for k in range(state.ifm):
        state.begin_block(k)
        if state.sq_norms[k] > 0:
            if strategy == ExecutionMode.DIRECT:
                step = vecmat(state.a_hat[:, k], state.carried) / state.sq_norms[k]
            else:
                step = state.carried_projection[0]
            target = W[:, k] + step
        else:
            target = W[:, k].copy()
            zero_norm.append(k)
            logger.debug(f"Zero-norm input column {k}; correction skipped")
        _check_finite(target, k)

        if mode == PassMode.QUANTIZE:
            exponents, clamped = block_exponents(np.abs(target)[:, None], fmt)
            _, decoded = quantize_at_exponents(target[:, None], exponents, fmt)
            state.w_hat[:, k] = decoded[:, 0]
            clamps += int(clamped.sum())
        else:
            state.w_hat[:, k] = target

        state.end_block()
        if observer is not None:
            observer(k, state)

    return _finish(W, A, A_hat, state, fmt, mode, zero_norm, clamps, 0, started)


def ed_block_pass(
    W, A, A_hat,
    fmt: BlockFormat,
    mode: PassMode = PassMode.QUANTIZE,
    strategy: ExecutionMode = ExecutionMode.LOW_MEMORY,
) -> LayerCalibResult:
    """
    Block-aware error diffusion; blocks run along IFM for every row of W.

    Inside a block, not-yet-visited columns hold round-to-nearest codes at the
    initial block scale. Each visited column is adjusted with its l_update
    divided by block_size, then the visited prefix of every row-block is
    re-encoded under the smallest scale that fits it. The prefix only grows,
    so scales never go down inside a block.
    """
    _validate_pass(fmt, mode)
    if fmt is None:
        raise ConfigError("the block pass needs a format for its block size")

    started = time.perf_counter()
    state = CalibState.create(W, A, A_hat, block_size=fmt.block_size, mode=strategy)
    W, A, A_hat = state.weights, np.asarray(A, dtype=np.float64), np.asarray(A_hat, dtype=np.float64)
    zero_norm: List[int] = []
    clamps = 0
    rescales = 0

    for block in range(state.n_blocks):
        start, stop = state.block_bounds(block)
        if mode == PassMode.QUANTIZE:
            initial, _ = block_exponents(np.abs(W[:, start:stop]).max(axis=1)[:, None], fmt)
            _, state.w_hat[:, start:stop] = quantize_at_exponents(W[:, start:stop], initial, fmt)
        state.begin_block(block)

        source = W[:, start:stop].copy()
        running_max = np.zeros(state.ofm)
        exponents = None
        clamped = np.zeros((state.ofm, 1), dtype=bool)

        for l in range(start, stop):
            if state.sq_norms[l] > 0:
                target = W[:, l] + _projected_step(state, block, l) / fmt.block_size
            else:
                target = W[:, l].copy()
                zero_norm.append(l)
                logger.debug(f"Zero-norm input column {l}; correction skipped")
            _check_finite(target, l)

            if mode == PassMode.UPDATE_ONLY:
                state.w_hat[:, l] = target
                continue

            offset = l - start
            source[:, offset] = target
            running_max = np.maximum(running_max, np.abs(target))
            previous = exponents
            exponents, clamped = block_exponents(running_max[:, None], fmt)
            if previous is not None:
                rescales += int(np.count_nonzero(exponents > previous))
            _, state.w_hat[:, start:l + 1] = quantize_at_exponents(source[:, :offset + 1], exponents, fmt)

        clamps += int(clamped.sum())
        state.end_block()

    if rescales:
        logger.debug(f"{rescales} in-block scale increases")
    return _finish(W, A, A_hat, state, fmt, mode, zero_norm, clamps, rescales, started)


def gpfq_pass(W, A, fmt: BlockFormat, strategy: ExecutionMode = ExecutionMode.LOW_MEMORY) -> LayerCalibResult:
    """Greedy path-following quantization: the diffusion pass with Â := A, so Õ = 0."""
    if fmt.block_size == 1:
        return ed_scalar_pass(W, A, A, fmt, PassMode.QUANTIZE, strategy)
    return ed_block_pass(W, A, A, fmt, PassMode.QUANTIZE, strategy)


def rtn_quantize(W, fmt: BlockFormat) -> QuantizedTensor:
    """Round-to-nearest baseline with no calibration."""
    return quantize_tensor(W, fmt, axis=1)


class QuantizePolicy(str, Enum):
    QUANTIZE = "quantize"
    CALIBRATE_ONLY = "calibrate_only"
    FROZEN = "frozen"


class DiffusionService:
    """Runs the per-layer calibration passes with the configured execution mode."""

    METHODS = ("ed", "gpfq", "rtn")

    def __init__(self, strategy: Optional[ExecutionMode] = None):
        try:
            self.strategy = ExecutionMode(strategy or ED_EXECUTION_MODE)
        except ValueError as e:
            raise ConfigError(f"unknown execution mode '{strategy or ED_EXECUTION_MODE}'") from e

    def calibrate_layer(
        self,
        W, A, A_hat,
        fmt: BlockFormat,
        method: str = "ed",
        policy: QuantizePolicy = QuantizePolicy.QUANTIZE,
        calibrate_unquantized: bool = False,
    ) -> Optional[LayerCalibResult]:
        """
        Calibrate one layer according to its policy.

        Returns None when the layer is left untouched: frozen layers, and
        calibrate-only layers unless update-only diffusion was requested.
        """
        if method not in self.METHODS:
            raise ConfigError(f"unknown method '{method}' (expected one of {', '.join(self.METHODS)})")
        policy = QuantizePolicy(policy)

        if policy == QuantizePolicy.FROZEN:
            return None
        if policy == QuantizePolicy.CALIBRATE_ONLY:
            if calibrate_unquantized and method == "ed":
                return self.update_only(W, A, A_hat)
            return None
        return self.quantize_layer(W, A, A_hat, fmt, method)

    def quantize_layer(self, W, A, A_hat, fmt: BlockFormat, method: str) -> LayerCalibResult:
        if method == "ed":
            if fmt.block_size == 1:
                return ed_scalar_pass(W, A, A_hat, fmt, PassMode.QUANTIZE, self.strategy)
            return ed_block_pass(W, A, A_hat, fmt, PassMode.QUANTIZE, self.strategy)
        if method == "gpfq":
            return gpfq_pass(W, A, fmt, self.strategy)
        return self.rtn_layer(W, A, A_hat, fmt)

    def update_only(self, W, A, A_hat) -> LayerCalibResult:
        """Diffusion without quantization, for layers kept in full precision."""
        return ed_scalar_pass(W, A, A_hat, None, PassMode.UPDATE_ONLY, self.strategy)

    def rtn_layer(self, W, A, A_hat, fmt: BlockFormat) -> LayerCalibResult:
        started = time.perf_counter()
        W, A, A_hat = _check_layer_shapes(W, A, A_hat)
        quantized = rtn_quantize(W, fmt)
        w_hat = quantized.dequantize()
        return LayerCalibResult(
            weights=w_hat,
            quantized=quantized,
            error_before=layer_output_error(A, W, A_hat, W),
            error_after=layer_output_error(A, W, A_hat, w_hat),
            scale_clamps=quantized.clamped_blocks,
            wall_time=time.perf_counter() - started,
        )
