"""Quantized GEMM under three accumulator models, plus the error metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .formats import decode
from .quant import QuantTensor, expand_scales

FULL = "full-precision"
LIMITED = "limited-fixed-point"
PROMOTED = "promoted"

_NO_EXP = np.iinfo(np.int64).min // 2


@dataclass(frozen=True)
class AccumulatorModel:
    """How partial sums are kept while walking the inner dimension.

    ``limited-fixed-point`` aligns every addend to the running maximum
    exponent and chops it to ``retained_bits`` significant bits before the
    add. ``promoted`` does the same inside chunks of ``interval`` inner
    elements and hands each chunk's sum, scaled, to a float64 accumulator.
    """

    mode: str = PROMOTED
    retained_bits: int = 14
    interval: int = 128

    def __post_init__(self):
        if self.mode not in (FULL, LIMITED, PROMOTED):
            raise ValueError(f"unknown accumulator mode {self.mode!r}")
        if self.retained_bits < 1 or self.interval < 1:
            raise ValueError("retained_bits and interval must be positive")


def _exponent(x: np.ndarray) -> np.ndarray:
    _, e = np.frexp(x)
    return np.where(x != 0, e.astype(np.int64), _NO_EXP)


def limited_accumulate(a: np.ndarray, b: np.ndarray, bits: int = 14) -> np.ndarray:
    """``a @ b`` with a fixed-point accumulator of ``bits`` significant bits.

    Addends are taken in inner-dimension order. Each one is truncated
    toward zero to a multiple of ``2**(E - bits)`` where ``E`` is the
    running maximum of the binary exponents seen so far (addends and
    accumulator), so ``bits`` counts the leading bit.
    """
    m, k = a.shape
    acc = np.zeros((m, b.shape[1]))
    emax = np.full(acc.shape, _NO_EXP, dtype=np.int64)
    for i in range(k):
        p = np.multiply.outer(a[:, i], b[i])
        emax = np.maximum(emax, np.maximum(_exponent(p), _exponent(acc)))
        shift = np.where(emax == _NO_EXP, 0, emax - bits)
        acc = acc + np.ldexp(np.trunc(np.ldexp(p, -shift)), shift)
    return acc


def _inner_scales(q: QuantTensor, left: bool, chunk: int) -> list[np.ndarray]:
    """Per inner-dim chunk scale vector, or raise if groups straddle chunks."""
    s = expand_scales(q.scales, q.shape, q.grouping, q.group_size)
    if not left:
        s = s.T
    k = s.shape[1]
    out = []
    for k0 in range(0, k, chunk):
        blk = s[:, k0 : k0 + chunk]
        if not np.all(blk == blk[:, :1]):
            raise ValueError("quantization groups are not aligned with the inner-dimension chunks")
        out.append(blk[:, 0])
    return out


def qgemm(a: QuantTensor, b: QuantTensor, acc: AccumulatorModel = AccumulatorModel()) -> np.ndarray:
    """Multiply two quantized matrices, ``a`` (M, K) by ``b`` (K, N)."""
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ValueError("qgemm needs 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dims differ: {a.shape} @ {b.shape}")
    k = a.shape[1]
    chunk = acc.interval if acc.mode == PROMOTED else min(a.group_size, b.group_size)
    sa = _inner_scales(a, True, chunk)
    sb = _inner_scales(b, False, chunk)
    ca = decode(a.codes, a.format)
    cb = decode(b.codes, b.format)
    if acc.mode == LIMITED:
        sa_full = np.concatenate([np.repeat(s[:, None], min(chunk, k - i * chunk), 1) for i, s in enumerate(sa)], 1)
        sb_full = np.concatenate([np.repeat(s[None, :], min(chunk, k - i * chunk), 0) for i, s in enumerate(sb)], 0)
        return limited_accumulate(ca * sa_full, cb * sb_full, acc.retained_bits)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i, k0 in enumerate(range(0, k, chunk)):
        xa, xb = ca[:, k0 : k0 + chunk], cb[k0 : k0 + chunk]
        part = xa @ xb if acc.mode == FULL else limited_accumulate(xa, xb, acc.retained_bits)
        out += part * np.multiply.outer(sa[i], sb[i])
    return out


@dataclass(frozen=True)
class ErrorStats:
    max: float
    mean: float


def relative_error(approx, reference, floor: float | None = None) -> ErrorStats:
    """Elementwise ``|a - r| / max(|r|, floor)``, reduced by max and by mean.

    ``floor`` defaults to a tenth of the largest reference magnitude so that
    entries near cancellation do not dominate.
    """
    a = np.asarray(approx, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {r.shape}")
    if floor is None:
        peak = np.abs(r).max() if r.size else 0.0
        if peak == 0:
            raise ValueError("reference is all zero; pass an explicit floor")
        floor = 0.1 * peak
    e = np.abs(a - r) / np.maximum(np.abs(r), floor)
    return ErrorStats(float(e.max()), float(e.mean()))
