"""Fine-grained scaled quantization and its on-disk layout."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .formats import E4M3, FORMATS, FpFormat, decode, encode, round_to_format

TILE = "tile-1x128"
COLUMN_TILE = "tile-128x1"
BLOCK = "block-128x128"
TENSOR = "tensor-wise"
GROUPINGS = (TILE, COLUMN_TILE, BLOCK, TENSOR)

_MAGIC = b"QT8\x01"


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Codes plus one positive scale per group; ``value = decode(code) * scale``."""

    codes: np.ndarray
    scales: np.ndarray
    grouping: str
    format: FpFormat
    shape: tuple
    group_size: int = 128

    def dequantize(self) -> np.ndarray:
        return decode(self.codes, self.format) * expand_scales(
            self.scales, self.shape, self.grouping, self.group_size
        )

    @property
    def pow2(self) -> bool:
        return is_pow2(self.scales)


def is_pow2(s) -> bool:
    frac, _ = np.frexp(np.asarray(s, dtype=np.float64))
    return bool(np.all(frac == 0.5))


def _starts(n: int, g: int) -> np.ndarray:
    return np.arange(0, n, g)


def _counts(n: int, g: int) -> np.ndarray:
    s = _starts(n, g)
    return np.diff(np.append(s, n))


def _as2d(shape) -> tuple[int, int]:
    if len(shape) == 1:
        return 1, shape[0]
    if len(shape) != 2:
        raise ValueError("quantization supports 1-D and 2-D tensors")
    return shape


def group_amax(x: np.ndarray, grouping: str, g: int = 128) -> np.ndarray:
    """Per-group max magnitude. The last group along an axis may be short."""
    a = np.abs(x.reshape(_as2d(x.shape)))
    r, c = a.shape
    if grouping == TENSOR:
        return np.array([a.max()])
    if grouping == TILE:
        return np.maximum.reduceat(a, _starts(c, g), axis=1)
    if grouping == COLUMN_TILE:
        return np.maximum.reduceat(a, _starts(r, g), axis=0)
    if grouping == BLOCK:
        rows = np.maximum.reduceat(a, _starts(r, g), axis=0)
        return np.maximum.reduceat(rows, _starts(c, g), axis=1)
    raise ValueError(f"unknown grouping {grouping!r}")


def expand_scales(scales: np.ndarray, shape, grouping: str, g: int = 128) -> np.ndarray:
    r, c = _as2d(tuple(shape))
    if grouping == TENSOR:
        full = np.full((r, c), scales.reshape(-1)[0])
    else:
        full = scales
        if grouping in (COLUMN_TILE, BLOCK):
            full = np.repeat(full, _counts(r, g), axis=0)
        if grouping in (TILE, BLOCK):
            full = np.repeat(full, _counts(c, g), axis=1)
    return full.reshape(shape)


def pow2_ceil(s: np.ndarray) -> np.ndarray:
    frac, e = np.frexp(s)
    return np.where(frac == 0.5, s, np.ldexp(1.0, e))


def quantize(
    x,
    grouping: str = TILE,
    fmt: FpFormat = E4M3,
    pow2_scales: bool = False,
    group_size: int = 128,
) -> QuantTensor:
    """Scale each group so its max magnitude maps to ``fmt.max_finite``, then encode.

    All-zero groups get scale 1. With ``pow2_scales`` the scale is rounded
    up to a power of two so the largest element cannot overflow.
    """
    x = np.asarray(x, dtype=np.float64)
    if grouping not in GROUPINGS:
        raise ValueError(f"unknown grouping {grouping!r}")
    amax = group_amax(x, grouping, group_size)
    scales = np.where(amax > 0, amax / fmt.max_finite, 1.0)
    if pow2_scales:
        scales = pow2_ceil(scales)
    full = expand_scales(scales, x.shape, grouping, group_size)
    codes = encode(x / full, fmt)
    return QuantTensor(codes, scales, grouping, fmt, tuple(x.shape), group_size)


def dequantize(q: QuantTensor) -> np.ndarray:
    return q.dequantize()


def requantize_transpose(q: QuantTensor) -> QuantTensor:
    """Re-tile a row-tiled tensor for use as the transposed operand.

    The result holds ``X.T`` grouped in 1x128 tiles, which are 128x1 tiles
    of ``X``. Power-of-two scales are required so the finer grid contains
    the coarser one and requantization adds at most one grid step.
    """
    if len(q.shape) != 2:
        raise ValueError("requantize_transpose needs a 2-D tensor")
    if not q.pow2:
        raise ValueError("requantize_transpose requires power-of-two scales")
    return quantize(q.dequantize().T, TILE, q.format, pow2_scales=True, group_size=q.group_size)


def to_bytes(q: QuantTensor) -> bytes:
    """Serialize as magic, header length, JSON header, codes, then float64 scales.

    Codes use unsigned little-endian integers of the format's width
    (one byte for 8-bit formats, two bytes otherwise).
    """
    header = json.dumps(
        {
            "format": q.format.name,
            "grouping": q.grouping,
            "shape": list(q.shape),
            "group_size": q.group_size,
            "scales_shape": list(q.scales.shape),
        },
        sort_keys=True,
    ).encode()
    code_dt = "<u1" if q.format.total_bits <= 8 else "<u2"
    return b"".join(
        [
            _MAGIC,
            struct.pack("<I", len(header)),
            header,
            np.ascontiguousarray(q.codes, dtype=code_dt).tobytes(),
            np.ascontiguousarray(q.scales, dtype="<f8").tobytes(),
        ]
    )


def from_bytes(buf: bytes) -> QuantTensor:
    if buf[:4] != _MAGIC:
        raise ValueError("not a QuantTensor payload")
    (n,) = struct.unpack("<I", buf[4:8])
    meta = json.loads(buf[8 : 8 + n])
    fmt = FORMATS[meta["format"]]
    shape = tuple(meta["shape"])
    code_dt = np.dtype("<u1" if fmt.total_bits <= 8 else "<u2")
    off = 8 + n
    count = int(np.prod(shape))
    codes = np.frombuffer(buf, code_dt, count, off).reshape(shape)
    off += count * code_dt.itemsize
    sshape = tuple(meta["scales_shape"])
    scales = np.frombuffer(buf, "<f8", int(np.prod(sshape)), off).reshape(sshape)
    return QuantTensor(
        codes.astype(code_dt.newbyteorder("=")),
        scales.astype(np.float64),
        meta["grouping"],
        fmt,
        shape,
        meta["group_size"],
    )


def fake_quant(x, grouping: str = TILE, fmt: FpFormat = E4M3, pow2_scales: bool = False, group_size: int = 128):
    """``dequantize(quantize(x))`` without materializing codes."""
    x = np.asarray(x, dtype=np.float64)
    amax = group_amax(x, grouping, group_size)
    scales = np.where(amax > 0, amax / fmt.max_finite, 1.0)
    if pow2_scales:
        scales = pow2_ceil(scales)
    full = expand_scales(scales, x.shape, grouping, group_size)
    return round_to_format(x / full, fmt) * full
