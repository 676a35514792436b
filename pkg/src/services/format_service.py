"""
Bit-exact emulation of scalar and block-scaled number formats.

Element codes put the sign bit in the most significant position, followed by
the exponent field and the mantissa field. Integer formats (no exponent bits)
are sign-magnitude. Floating formats have subnormals and no inf/NaN codes.
A block-scaled value is ``2**e * p`` where ``e`` is the block's shared
power-of-two exponent and ``p`` the element value, so decoding never rounds.
"""
import dataclasses
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ..utils.errors import ConfigError, FormatError, ShapeError, UnknownFormatError
from ..utils.settings import get_logger

logger = get_logger()


@dataclass(frozen=True)
class ElementFormat:
    """Per-value encoding: sign, exponent and mantissa widths plus bias."""

    name: str
    sign_bits: int = 1
    exponent_bits: int = 0
    mantissa_bits: int = 3
    exponent_bias: int = 0
    has_subnormals: bool = True
    saturating: bool = True

    def __post_init__(self):
        if self.sign_bits not in (0, 1):
            raise ConfigError(f"{self.name}: sign_bits must be 0 or 1")
        if self.exponent_bits < 0 or self.mantissa_bits < 0:
            raise ConfigError(f"{self.name}: field widths must be non-negative")
        if not 2 <= self.width <= 8:
            raise ConfigError(f"{self.name}: total width {self.width} outside [2, 8]")

    @property
    def width(self) -> int:
        return self.sign_bits + self.exponent_bits + self.mantissa_bits

    @property
    def is_integer(self) -> bool:
        return self.exponent_bits == 0

    @property
    def max_value(self) -> float:
        return float(_magnitude_table(self)[0][-1])


@dataclass(frozen=True)
class ScaleFormat:
    """Shared power-of-two scale: ``2**(code - bias)``."""

    exponent_bits: int = 8
    exponent_bias: int = 127
    special_code_nan: Optional[int] = None

    def __post_init__(self):
        # scale codes are stored one byte per block
        if not 1 <= self.exponent_bits <= 8:
            raise ConfigError(f"scale width {self.exponent_bits} outside [1, 8]")

    @property
    def width(self) -> int:
        return self.exponent_bits

    def _valid_codes(self) -> Tuple[int, int]:
        low, high = 0, (1 << self.exponent_bits) - 1
        if self.special_code_nan == low:
            low += 1
        if self.special_code_nan == high:
            high -= 1
        return low, high

    @property
    def min_exponent(self) -> int:
        return self._valid_codes()[0] - self.exponent_bias

    @property
    def max_exponent(self) -> int:
        return self._valid_codes()[1] - self.exponent_bias

    def encode(self, exponent: int) -> int:
        if not self.min_exponent <= exponent <= self.max_exponent:
            raise FormatError(f"scale exponent {exponent} outside [{self.min_exponent}, {self.max_exponent}]")
        return exponent + self.exponent_bias

    def exponent_of(self, code: int) -> int:
        if code == self.special_code_nan:
            raise FormatError("scale code is the NaN encoding")
        if not 0 <= code < (1 << self.exponent_bits):
            raise FormatError(f"scale code {code} outside {self.exponent_bits}-bit range")
        return code - self.exponent_bias

    def decode(self, code: int) -> float:
        return math.ldexp(1.0, self.exponent_of(code))


@dataclass(frozen=True)
class BlockFormat:
    """Block-scaled format: ``block_size`` elements share one scale."""

    name: str
    element: ElementFormat
    scale: ScaleFormat = field(default_factory=ScaleFormat)
    block_size: int = 32

    def __post_init__(self):
        if self.block_size < 1:
            raise ConfigError(f"{self.name}: block_size must be at least 1")

    @property
    def bits_per_value(self) -> float:
        return self.element.width + self.scale.width / self.block_size


NumberFormat = Union[ElementFormat, BlockFormat]


@dataclass(frozen=True)
class QuantizedBlock:
    scale_code: int
    element_codes: Tuple[int, ...]
    clamped: bool = False


class ScaleChoice(NamedTuple):
    code: int
    exponent: int
    clamped: bool


@dataclass(frozen=True)
class FormatStats:
    dynamic_range: float
    precision: float
    alphabet_size: int
    unique_value_count: int
    max_value: float
    min_nonzero_value: float
    bits_per_value: float


# ==================== Element codec ====================

def _magnitude_of(code: int, fmt: ElementFormat) -> float:
    if fmt.is_integer:
        return float(code)
    exponent_field = code >> fmt.mantissa_bits
    mantissa = code & ((1 << fmt.mantissa_bits) - 1)
    if exponent_field == 0:
        if not fmt.has_subnormals:
            return 0.0
        return math.ldexp(mantissa, 1 - fmt.exponent_bias - fmt.mantissa_bits)
    return math.ldexp((1 << fmt.mantissa_bits) + mantissa, exponent_field - fmt.exponent_bias - fmt.mantissa_bits)


@lru_cache(maxsize=None)
def _value_table(fmt: ElementFormat) -> np.ndarray:
    """Decoded value for every code, -0 collapsed to +0."""
    magnitude_bits = fmt.width - fmt.sign_bits
    values = np.empty(1 << fmt.width, dtype=np.float64)
    for code in range(1 << fmt.width):
        magnitude = _magnitude_of(code & ((1 << magnitude_bits) - 1), fmt)
        negative = fmt.sign_bits and (code >> magnitude_bits) & 1
        values[code] = -magnitude if negative and magnitude != 0.0 else magnitude
    values.setflags(write=False)
    return values


@lru_cache(maxsize=None)
def _magnitude_table(fmt: ElementFormat) -> Tuple[np.ndarray, np.ndarray]:
    """Sorted distinct magnitudes and the smallest magnitude code producing each."""
    magnitude_bits = fmt.width - fmt.sign_bits
    magnitudes = np.array([_magnitude_of(c, fmt) for c in range(1 << magnitude_bits)])
    distinct, first_code = np.unique(magnitudes, return_index=True)
    distinct.setflags(write=False)
    first_code.setflags(write=False)
    return distinct, first_code.astype(np.int64)


def encode_array(values, fmt: ElementFormat) -> np.ndarray:
    """Round every value to the nearest code, ties to even mantissa, saturating."""
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FormatError("non-finite value")

    magnitudes, codes = _magnitude_table(fmt)
    mag = np.abs(x)
    if fmt.sign_bits == 0:
        mag = np.where(x < 0, 0.0, mag)
    if not fmt.saturating:
        # overflow once the value would round past the top code
        limit = magnitudes[-1] + (magnitudes[-1] - magnitudes[-2]) * 0.5
        top_is_odd = bool(codes[-1] % 2)
        if np.any((mag > limit) | ((mag == limit) & top_is_odd)):
            raise FormatError(f"value out of range for {fmt.name}")

    idx = np.searchsorted(magnitudes, mag, side="left")
    hi = np.minimum(idx, len(magnitudes) - 1)
    lo = np.maximum(np.minimum(idx - 1, hi), 0)
    midpoint = (magnitudes[lo] + magnitudes[hi]) * 0.5
    code_lo, code_hi = codes[lo], codes[hi]
    tie_goes_up = (code_hi % 2 == 0) & (code_lo % 2 == 1)
    pick_hi = (mag > midpoint) | ((mag == midpoint) & tie_goes_up)
    magnitude_code = np.where(pick_hi, code_hi, code_lo)

    if fmt.sign_bits:
        negative = (x < 0) & (magnitude_code != 0)
        magnitude_code = magnitude_code | (negative.astype(np.int64) << (fmt.width - 1))
    return magnitude_code.astype(np.uint8)


def decode_array(codes, fmt: ElementFormat) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << fmt.width)):
        raise FormatError(f"code outside {fmt.width}-bit range for {fmt.name}")
    return _value_table(fmt)[codes]


def enumerate_values(fmt: ElementFormat) -> List[float]:
    """Every decodable real of the format, deduplicated and sorted."""
    return np.unique(_value_table(fmt)).tolist()


def encode_element(x: float, fmt: ElementFormat) -> int:
    if not math.isfinite(x):
        raise FormatError("non-finite value")
    return int(encode_array(np.array([x]), fmt)[0])


def decode_element(code: int, fmt: ElementFormat) -> float:
    return float(decode_array(np.array([code]), fmt)[0])


# ==================== Shared scales ====================

def block_exponents(amax, fmt: BlockFormat) -> Tuple[np.ndarray, np.ndarray]:
    """
    Smallest exponent e with ``amax / 2**e <= element max`` for every block maximum.

    All-zero blocks get the minimum exponent. Exponents outside the scale range
    are clamped; the second array flags those blocks.
    """
    amax = np.asarray(amax, dtype=np.float64)
    element_max = fmt.element.max_value
    exponents = np.full(amax.shape, fmt.scale.min_exponent, dtype=np.int64)

    nonzero = amax > 0
    if np.any(nonzero):
        peaks = amax[nonzero]
        guess = np.ceil(np.log2(peaks / element_max)).astype(np.int64)
        # log2 may be one ulp off around exact powers of two
        guess = np.where(peaks > np.ldexp(element_max, guess.astype(np.int32)), guess + 1, guess)
        guess = np.where(peaks <= np.ldexp(element_max, (guess - 1).astype(np.int32)), guess - 1, guess)
        exponents[nonzero] = guess

    clamped = (exponents < fmt.scale.min_exponent) | (exponents > fmt.scale.max_exponent)
    exponents = np.clip(exponents, fmt.scale.min_exponent, fmt.scale.max_exponent)
    return exponents, clamped


def quantize_at_exponents(values, exponents, fmt: BlockFormat) -> Tuple[np.ndarray, np.ndarray]:
    """Encode values against given (broadcastable) scale exponents; returns codes and decoded values."""
    exponents = np.asarray(exponents).astype(np.int32)
    scaled = np.ldexp(np.asarray(values, dtype=np.float64), -exponents)
    codes = encode_array(scaled, fmt.element)
    decoded = np.ldexp(decode_array(codes, fmt.element), exponents)
    return codes, decoded


def select_block_scale(values: Sequence[float], fmt: BlockFormat) -> ScaleChoice:
    block = np.asarray(values, dtype=np.float64)
    if block.size != fmt.block_size:
        raise ShapeError(f"block has {block.size} values, {fmt.name} expects {fmt.block_size}")
    finite = block[np.isfinite(block)]
    if finite.size == 0:
        raise FormatError("non-finite value")

    exponents, clamped = block_exponents(np.array([np.abs(finite).max()]), fmt)
    exponent = int(exponents[0])
    if clamped[0]:
        logger.debug(f"Scale clamped to 2^{exponent} for {fmt.name}")
    return ScaleChoice(code=fmt.scale.encode(exponent), exponent=exponent, clamped=bool(clamped[0]))


def quantize_block(values: Sequence[float], fmt: BlockFormat) -> QuantizedBlock:
    choice = select_block_scale(values, fmt)
    codes, _ = quantize_at_exponents(values, choice.exponent, fmt)
    return QuantizedBlock(
        scale_code=choice.code,
        element_codes=tuple(int(c) for c in codes),
        clamped=choice.clamped,
    )


def dequantize_block(qb: QuantizedBlock, fmt: BlockFormat) -> List[float]:
    exponent = fmt.scale.exponent_of(qb.scale_code)
    return [math.ldexp(decode_element(code, fmt.element), exponent) for code in qb.element_codes]


# ==================== Tensors ====================

@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """
    Block-quantized 2-D tensor.

    Codes are stored with the block axis last: ``element_codes`` has shape
    (rows, length) and ``scale_codes`` (rows, n_blocks), where rows run across
    the other axis. A short final block is encoded on its own.
    """

    fmt: BlockFormat
    axis: int
    shape: Tuple[int, int]
    scale_codes: np.ndarray
    element_codes: np.ndarray
    clamped_blocks: int = 0

    @property
    def n_blocks(self) -> int:
        return self.scale_codes.shape[1]

    def exponents(self) -> np.ndarray:
        return self.scale_codes.astype(np.int64) - self.fmt.scale.exponent_bias

    def dequantize(self) -> np.ndarray:
        length = self.element_codes.shape[1]
        per_element = np.repeat(self.exponents(), self.fmt.block_size, axis=1)[:, :length]
        values = np.ldexp(decode_array(self.element_codes, self.fmt.element), per_element.astype(np.int32))
        return values.T.copy() if self.axis == 0 else values

    def block(self, row: int, index: int) -> QuantizedBlock:
        start = index * self.fmt.block_size
        codes = self.element_codes[row, start:start + self.fmt.block_size]
        return QuantizedBlock(
            scale_code=int(self.scale_codes[row, index]),
            element_codes=tuple(int(c) for c in codes),
        )


def block_starts(length: int, block_size: int) -> np.ndarray:
    return np.arange(0, length, block_size)


def quantize_tensor(tensor, fmt: BlockFormat, axis: int = 1) -> QuantizedTensor:
    """Round-to-nearest block quantization with blocks running along ``axis``."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"quantize_tensor expects a matrix, got shape {arr.shape}")
    if axis not in (0, 1, -1, -2):
        raise ShapeError(f"axis {axis} out of range for a matrix")
    axis = axis % 2
    if 0 in arr.shape:
        raise ShapeError(f"cannot quantize empty tensor of shape {arr.shape}")

    work = arr.T if axis == 0 else arr
    length = work.shape[1]
    amax = np.maximum.reduceat(np.abs(work), block_starts(length, fmt.block_size), axis=1)
    if not np.all(np.isfinite(amax)):
        raise FormatError("non-finite value")
    exponents, clamped = block_exponents(amax, fmt)
    per_element = np.repeat(exponents, fmt.block_size, axis=1)[:, :length]
    codes, _ = quantize_at_exponents(work, per_element, fmt)

    if np.any(clamped):
        logger.debug(f"{int(clamped.sum())} blocks clamped while quantizing to {fmt.name}")
    return QuantizedTensor(
        fmt=fmt,
        axis=axis,
        shape=tuple(arr.shape),
        scale_codes=(exponents + fmt.scale.exponent_bias).astype(np.uint16),
        element_codes=codes,
        clamped_blocks=int(clamped.sum()),
    )


# ==================== Stats ====================

def _decoded_values(fmt: NumberFormat) -> np.ndarray:
    if isinstance(fmt, ElementFormat):
        return np.unique(_value_table(fmt))
    elements = np.unique(_value_table(fmt.element))
    exponents = np.arange(fmt.scale.min_exponent, fmt.scale.max_exponent + 1, dtype=np.int32)
    products = np.ldexp(elements[:, None], exponents[None, :]).ravel() + 0.0
    return np.unique(products)


def format_stats(fmt: NumberFormat) -> FormatStats:
    """Stats by exhaustive enumeration; for block formats over all scale x element products."""
    values = _decoded_values(fmt)
    magnitudes = np.unique(np.abs(values))
    nonzero = magnitudes[magnitudes > 0]
    element = fmt if isinstance(fmt, ElementFormat) else fmt.element
    bits = float(fmt.width) if isinstance(fmt, ElementFormat) else fmt.bits_per_value

    return FormatStats(
        dynamic_range=float(nonzero[-1] / nonzero[0]),
        precision=float(np.diff(magnitudes).min()),
        alphabet_size=len(enumerate_values(element)),
        unique_value_count=int(values.size),
        max_value=float(nonzero[-1]),
        min_nonzero_value=float(nonzero[0]),
        bits_per_value=bits,
    )


def block_values(fmt: BlockFormat) -> List[float]:
    """Every real a block-scaled format can decode to."""
    return _decoded_values(fmt).tolist()


# ==================== Serialisation ====================

def format_to_dict(fmt: BlockFormat) -> Dict[str, object]:
    element = fmt.element
    return {
        "name": fmt.name,
        "block_size": fmt.block_size,
        "element": {
            "name": element.name,
            "sign_bits": element.sign_bits,
            "exponent_bits": element.exponent_bits,
            "mantissa_bits": element.mantissa_bits,
            "exponent_bias": element.exponent_bias,
            "has_subnormals": element.has_subnormals,
            "saturating": element.saturating,
        },
        "scale": {
            "exponent_bits": fmt.scale.exponent_bits,
            "exponent_bias": fmt.scale.exponent_bias,
            "special_code_nan": fmt.scale.special_code_nan,
        },
    }


def format_from_dict(data: Dict[str, object]) -> BlockFormat:
    try:
        return BlockFormat(
            name=data["name"],
            element=ElementFormat(**data["element"]),
            scale=ScaleFormat(**data["scale"]),
            block_size=int(data["block_size"]),
        )
    except (KeyError, TypeError) as e:
        raise ConfigError(f"invalid format descriptor: {e}") from e


# ==================== Registry ====================

INT3 = ElementFormat("int3", sign_bits=1, exponent_bits=0, mantissa_bits=2)
INT4 = ElementFormat("int4", sign_bits=1, exponent_bits=0, mantissa_bits=3)
FP4_E2M1 = ElementFormat("fp4_e2m1", sign_bits=1, exponent_bits=2, mantissa_bits=1, exponent_bias=1)
FP6_E2M3 = ElementFormat("fp6_e2m3", sign_bits=1, exponent_bits=2, mantissa_bits=3, exponent_bias=1)
FP6_E3M2 = ElementFormat("fp6_e3m2", sign_bits=1, exponent_bits=3, mantissa_bits=2, exponent_bias=3)

MX_SCALE = ScaleFormat(exponent_bits=8, exponent_bias=127)
# 4-bit scale spanning 2^-7 .. 2^8
B4_SCALE = ScaleFormat(exponent_bits=4, exponent_bias=7)


class FormatService:
    """Registry of named number formats and parser for custom format strings."""

    MX_BLOCK_SIZE = 32
    CUSTOM_PATTERN = re.compile(r"^b(\d+)e(\d+)m(\d+)s(\d+)$")

    def __init__(self):
        self._formats: Dict[str, NumberFormat] = {}
        for element in (INT3, INT4, FP4_E2M1, FP6_E2M3, FP6_E3M2):
            self.register(element)
        self.register(BlockFormat("b4int3", INT3, B4_SCALE, 4))
        for name, element in (
            ("mxint3", INT3),
            ("mxint4", INT4),
            ("mxfp4", FP4_E2M1),
            ("mxfp6_e2m3", FP6_E2M3),
            ("mxfp6_e3m2", FP6_E3M2),
        ):
            self.register(BlockFormat(name, element, MX_SCALE, self.MX_BLOCK_SIZE))

    def register(self, fmt: NumberFormat):
        self._formats[fmt.name] = fmt

    def names(self) -> List[str]:
        return list(self._formats)

    def get(self, name: str) -> NumberFormat:
        """Registry lookup, falling back to the custom string syntax."""
        if name in self._formats:
            return self._formats[name]
        if self.CUSTOM_PATTERN.match(name):
            return self.parse(name)
        raise UnknownFormatError(f"unknown format '{name}' (known: {', '.join(self._formats)})")

    def parse(self, spec: str) -> BlockFormat:
        """Build a format from ``b<block>e<exp>m<man>s<scalebits>``."""
        match = self.CUSTOM_PATTERN.match(spec)
        if not match:
            raise UnknownFormatError(f"'{spec}' is not a b<block>e<exp>m<man>s<scalebits> string")
        block, exp_bits, man_bits, scale_bits = (int(g) for g in match.groups())
        if not 1 <= scale_bits <= 8:
            raise ConfigError(f"{spec}: scale width must be between 1 and 8 bits")

        bias = (1 << (exp_bits - 1)) - 1 if exp_bits > 0 else 0
        element = ElementFormat(
            name=f"e{exp_bits}m{man_bits}",
            sign_bits=1,
            exponent_bits=exp_bits,
            mantissa_bits=man_bits,
            exponent_bias=bias,
        )
        scale = ScaleFormat(exponent_bits=scale_bits, exponent_bias=(1 << (scale_bits - 1)) - 1)
        return BlockFormat(name=spec, element=element, scale=scale, block_size=block)

    def resolve(self, name: str, block_size: Optional[int] = None) -> BlockFormat:
        """Any format name as a block format; scalar formats get a private 8-bit scale."""
        fmt = self.get(name)
        if isinstance(fmt, ElementFormat):
            return BlockFormat(name=name, element=fmt, scale=MX_SCALE, block_size=block_size or 1)
        if block_size is not None and block_size != fmt.block_size:
            return dataclasses.replace(fmt, name=f"{fmt.name}_b{block_size}", block_size=block_size)
        return fmt
