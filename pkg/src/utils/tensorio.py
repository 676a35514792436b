"""
Binary containers for dense and block-quantized tensors.

``.tct`` layout::

    b"TCT1" | u32 LE manifest length | UTF-8 JSON manifest | payload

The manifest maps tensor names to ``{"dtype", "shape", "offset", "length"}``
with offsets relative to the start of the payload. Data is little-endian,
row-major.

``.tcq`` layout::

    b"TCQ1" | u32 LE header length | UTF-8 JSON header | payload

The header maps tensor names to their format descriptor, block axis, shape and
two payload ranges: ``scale_codes`` (one little-endian u8 per block when the
scale is at most 8 bits wide, u16 otherwise) and ``element_codes`` (codes of
``element.width`` bits packed LSB-first: code i occupies bits
``[i*width, (i+1)*width)`` of the byte stream, counting from bit 0 of byte 0).
Codes are listed block axis last, rows first.

Writers lay tensors out in sorted-name order and emit JSON with sorted keys, so
equal inputs always give byte-identical files.
"""
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from ..services.format_service import QuantizedTensor, format_from_dict, format_to_dict
from .errors import ArtifactIOError, NumericalAbort
from .settings import get_logger

logger = get_logger()

TCT_MAGIC = b"TCT1"
TCQ_MAGIC = b"TCQ1"
HEADER_LENGTH = struct.Struct("<I")

DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "u1": np.dtype("<u1"),
    "u2": np.dtype("<u2"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
}


@dataclass(frozen=True)
class ManifestEntry:
    dtype: str
    shape: Tuple[int, ...]
    offset: int
    length: int


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Named dense tensor; float data must be finite."""

    name: str
    data: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @classmethod
    def ingest(cls, name: str, data) -> "DenseTensor":
        arr = np.asarray(data)
        if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
            raise NumericalAbort(f"tensor '{name}' contains non-finite values")
        return cls(name=name, data=arr)


def _dtype_key(arr: np.ndarray) -> str:
    for key, dtype in DTYPES.items():
        if arr.dtype.kind == dtype.kind and arr.dtype.itemsize == dtype.itemsize:
            return key
    raise ArtifactIOError(f"unsupported dtype {arr.dtype}")


def _dump_json(data) -> bytes:
    return json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_framed(path: Path, magic: bytes, header: dict, payload: bytes):
    body = _dump_json(header)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(magic)
        handle.write(HEADER_LENGTH.pack(len(body)))
        handle.write(body)
        handle.write(payload)


def _read_framed(path: Path, magic: bytes) -> Tuple[dict, bytes]:
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"file not found: {path}")
    raw = path.read_bytes()

    if raw[:len(magic)] != magic:
        raise ArtifactIOError(f"corrupt magic in {path}")
    start = len(magic) + HEADER_LENGTH.size
    if len(raw) < start:
        raise ArtifactIOError(f"truncated header in {path}")
    (header_length,) = HEADER_LENGTH.unpack_from(raw, len(magic))
    if len(raw) < start + header_length:
        raise ArtifactIOError(f"truncated header in {path}")

    try:
        header = json.loads(raw[start:start + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ArtifactIOError(f"unreadable manifest in {path}: {e}") from e
    return header, raw[start + header_length:]


def _check_ranges(ranges: List[Tuple[str, int, int]], payload_size: int, path: Path):
    """Ranges must fit in the payload and must not overlap."""
    previous_end, previous_name = 0, None
    for name, offset, length in sorted(ranges, key=lambda r: (r[1], r[2])):
        if offset < 0 or length < 0:
            raise ArtifactIOError(f"negative range for '{name}' in {path}")
        if offset + length > payload_size:
            raise ArtifactIOError(f"truncated payload for '{name}' in {path}")
        if previous_name is not None and offset < previous_end:
            raise ArtifactIOError(f"overlapping ranges '{previous_name}' and '{name}' in {path}")
        previous_end, previous_name = offset + length, name


# ==================== Dense containers ====================

def write_container(path, tensors: Dict[str, np.ndarray]):
    """Write named arrays to a ``.tct`` file."""
    manifest: Dict[str, dict] = {}
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        key = _dtype_key(arr)
        data = np.ascontiguousarray(arr, dtype=DTYPES[key]).tobytes()
        manifest[name] = {"dtype": key, "shape": list(arr.shape), "offset": offset, "length": len(data)}
        chunks.append(data)
        offset += len(data)

    _write_framed(path, TCT_MAGIC, {"tensors": manifest}, b"".join(chunks))
    logger.debug(f"Wrote {len(manifest)} tensors to {path}")


def read_manifest(path) -> Dict[str, ManifestEntry]:
    header, payload = _read_framed(path, TCT_MAGIC)
    return _parse_manifest(header, len(payload), Path(path))


def _parse_manifest(header: dict, payload_size: int, path: Path) -> Dict[str, ManifestEntry]:
    try:
        entries = {
            name: ManifestEntry(
                dtype=spec["dtype"],
                shape=tuple(int(d) for d in spec["shape"]),
                offset=int(spec["offset"]),
                length=int(spec["length"]),
            )
            for name, spec in header["tensors"].items()
        }
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ArtifactIOError(f"malformed manifest in {path}: {e}") from e

    _check_ranges([(n, e.offset, e.length) for n, e in entries.items()], payload_size, path)
    for name, entry in entries.items():
        if entry.dtype not in DTYPES:
            raise ArtifactIOError(f"unsupported dtype '{entry.dtype}' for '{name}' in {path}")
        expected = int(np.prod(entry.shape, dtype=np.int64)) * DTYPES[entry.dtype].itemsize
        if expected != entry.length:
            raise ArtifactIOError(f"length of '{name}' does not match its shape in {path}")
    return entries


def read_container(path) -> Dict[str, np.ndarray]:
    """Read every tensor of a ``.tct`` file, in manifest offset order."""
    header, payload = _read_framed(path, TCT_MAGIC)
    entries = _parse_manifest(header, len(payload), Path(path))

    tensors: Dict[str, np.ndarray] = {}
    for name, entry in sorted(entries.items(), key=lambda item: item[1].offset):
        chunk = payload[entry.offset:entry.offset + entry.length]
        arr = np.frombuffer(chunk, dtype=DTYPES[entry.dtype]).reshape(entry.shape).copy()
        tensors[name] = DenseTensor.ingest(name, arr).data
    return tensors


# ==================== Quantized containers ====================

def pack_codes(codes, width: int) -> bytes:
    """Pack unsigned codes of ``width`` bits, LSB-first."""
    codes = np.asarray(codes, dtype=np.uint16).ravel()
    bits = ((codes[:, None] >> np.arange(width, dtype=np.uint16)) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_codes(data: bytes, width: int, count: int) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits.size < count * width:
        raise ArtifactIOError("truncated element codes")
    bits = bits[:count * width].reshape(count, width).astype(np.uint16)
    return (bits << np.arange(width, dtype=np.uint16)).sum(axis=1).astype(np.uint8)


def write_quantized(path, tensors: Dict[str, QuantizedTensor]):
    """Write quantized tensors to a ``.tcq`` file."""
    header: Dict[str, dict] = {}
    chunks: List[bytes] = []
    offset = 0
    for name in sorted(tensors):
        qt = tensors[name]
        scale_dtype = "<u1" if qt.fmt.scale.width <= 8 else "<u2"
        scale_bytes = np.ascontiguousarray(qt.scale_codes, dtype=scale_dtype).tobytes()
        element_bytes = pack_codes(qt.element_codes, qt.fmt.element.width)

        header[name] = {
            "format": format_to_dict(qt.fmt),
            "block_axis": qt.axis,
            "shape": list(qt.shape),
            "clamped_blocks": qt.clamped_blocks,
            "scale_codes": {"offset": offset, "length": len(scale_bytes), "shape": list(qt.scale_codes.shape)},
            "element_codes": {
                "offset": offset + len(scale_bytes),
                "length": len(element_bytes),
                "shape": list(qt.element_codes.shape),
            },
        }
        chunks.extend((scale_bytes, element_bytes))
        offset += len(scale_bytes) + len(element_bytes)

    _write_framed(path, TCQ_MAGIC, {"tensors": header}, b"".join(chunks))
    logger.debug(f"Wrote {len(header)} quantized tensors to {path}")


def read_quantized(path) -> Dict[str, QuantizedTensor]:
    header, payload = _read_framed(path, TCQ_MAGIC)
    path = Path(path)
    try:
        specs = header["tensors"]
        ranges = []
        for name, spec in specs.items():
            ranges.append((f"{name}:scales", int(spec["scale_codes"]["offset"]), int(spec["scale_codes"]["length"])))
            ranges.append((f"{name}:elements", int(spec["element_codes"]["offset"]), int(spec["element_codes"]["length"])))
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ArtifactIOError(f"malformed header in {path}: {e}") from e
    _check_ranges(ranges, len(payload), path)

    tensors: Dict[str, QuantizedTensor] = {}
    for name, spec in specs.items():
        fmt = format_from_dict(spec["format"])
        scale_dtype = "<u1" if fmt.scale.width <= 8 else "<u2"
        scale_range, element_range = spec["scale_codes"], spec["element_codes"]
        scale_shape = tuple(scale_range["shape"])
        element_shape = tuple(element_range["shape"])

        scale_chunk = payload[scale_range["offset"]:scale_range["offset"] + scale_range["length"]]
        scale_codes = np.frombuffer(scale_chunk, dtype=scale_dtype)
        if scale_codes.size != int(np.prod(scale_shape)):
            raise ArtifactIOError(f"scale code count mismatch for '{name}' in {path}")
        element_chunk = payload[element_range["offset"]:element_range["offset"] + element_range["length"]]
        element_codes = unpack_codes(element_chunk, fmt.element.width, int(np.prod(element_shape)))

        tensors[name] = QuantizedTensor(
            fmt=fmt,
            axis=int(spec["block_axis"]),
            shape=tuple(spec["shape"]),
            scale_codes=scale_codes.reshape(scale_shape).astype(np.uint16),
            element_codes=element_codes.reshape(element_shape),
            clamped_blocks=int(spec.get("clamped_blocks", 0)),
        )
    return tensors
