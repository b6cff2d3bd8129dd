"""Small floating-point formats: bit layouts, rounding, encode and decode."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

SATURATING = "saturating-no-inf"
IEEE = "ieee-like"


@dataclass(frozen=True)
class FpFormat:
    """A sign/exponent/mantissa format with one sign bit.

    ``semantics`` selects how the all-ones exponent is used. Under
    ``saturating-no-inf`` it holds ordinary values except the single
    all-ones pattern, which is NaN, and overflow clamps to ``max_finite``.
    Under ``ieee-like`` it is reserved for infinities and NaNs.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    semantics: str = IEEE

    def __post_init__(self):
        if self.exponent_bits < 1 or self.mantissa_bits < 1:
            raise ValueError("format needs at least one exponent and one mantissa bit")
        if self.semantics not in (SATURATING, IEEE):
            raise ValueError(f"unknown semantics {self.semantics!r}")

    @property
    def total_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def min_exponent(self) -> int:
        return 1 - self.bias

    @property
    def max_exponent(self) -> int:
        top = 2**self.exponent_bits - 1
        return (top if self.semantics == SATURATING else top - 1) - self.bias

    @property
    def max_finite(self) -> float:
        mb = self.mantissa_bits
        # saturating formats lose only the all-ones mantissa at the top exponent
        frac = 2.0 - (2.0 ** (1 - mb) if self.semantics == SATURATING else 2.0**-mb)
        return float(frac * 2.0**self.max_exponent)

    @property
    def nan_code(self) -> int:
        exp_ones = (2**self.exponent_bits - 1) << self.mantissa_bits
        if self.semantics == SATURATING:
            return exp_ones | (2**self.mantissa_bits - 1)
        return exp_ones | (1 << (self.mantissa_bits - 1))

    @cached_property
    def table(self) -> np.ndarray:
        """Decoded value of every code, indexed by code."""
        codes = np.arange(2**self.total_bits, dtype=np.int64)
        return _decode_fields(codes, self)

    def is_nan_code(self, code) -> np.ndarray:
        mag = np.asarray(code) & (2 ** (self.total_bits - 1) - 1)
        return np.isnan(self.table[mag])


E4M3 = FpFormat("E4M3", 4, 3, 7, SATURATING)
E5M2 = FpFormat("E5M2", 5, 2, 15, IEEE)
E5M6 = FpFormat("E5M6", 5, 6, 15, IEEE)
BF16 = FpFormat("BF16", 8, 7, 127, IEEE)

FORMATS = {f.name: f for f in (E4M3, E5M2, E5M6, BF16)}


def _decode_fields(codes: np.ndarray, fmt: FpFormat) -> np.ndarray:
    mb, eb = fmt.mantissa_bits, fmt.exponent_bits
    sign = np.where((codes >> (eb + mb)) & 1, -1.0, 1.0)
    e = (codes >> mb) & (2**eb - 1)
    m = (codes & (2**mb - 1)).astype(np.float64)
    sub = e == 0
    exp = np.where(sub, fmt.min_exponent, e - fmt.bias).astype(np.float64)
    frac = np.where(sub, m / 2**mb, 1.0 + m / 2**mb)
    val = sign * frac * np.exp2(exp)
    top = e == 2**eb - 1
    if fmt.semantics == SATURATING:
        val = np.where(top & (m == 2**mb - 1), np.nan, val)
    else:
        val = np.where(top, np.where(m == 0, sign * np.inf, np.nan), val)
    return val


def _binade(mag: np.ndarray, fmt: FpFormat) -> np.ndarray:
    """Exponent of the binade holding ``mag``, clamped into the subnormal range."""
    _, e = np.frexp(mag)
    return np.maximum(e.astype(np.int64) - 1, fmt.min_exponent)


def round_to_format(x, fmt: FpFormat) -> np.ndarray:
    """Round to the nearest representable value, ties to even.

    Overflow gives ``±max_finite`` for saturating formats and ``±inf``
    otherwise. NaN stays NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    mag = np.abs(x)
    quantum = np.exp2((_binade(mag, fmt) - fmt.mantissa_bits).astype(np.float64))
    r = np.rint(mag / quantum) * quantum
    over = r > fmt.max_finite
    if fmt.semantics == SATURATING:
        r = np.where(over | np.isinf(mag), fmt.max_finite, r)
    else:
        r = np.where(over, np.inf, r)
    return np.copysign(r, x)


def ulp(x, fmt: FpFormat) -> np.ndarray:
    """Spacing of the format's grid around ``x``."""
    mag = np.abs(np.asarray(x, dtype=np.float64))
    return np.exp2((_binade(mag, fmt) - fmt.mantissa_bits).astype(np.float64))


def encode(x, fmt: FpFormat) -> np.ndarray:
    """Map reals to integer codes (sign bit is the top bit)."""
    x = np.asarray(x, dtype=np.float64)
    r = round_to_format(x, fmt)
    mag = np.abs(r)
    mb = fmt.mantissa_bits
    sign = np.signbit(r).astype(np.int64) << (fmt.exponent_bits + mb)
    finite = np.isfinite(mag)
    safe = np.where(finite, mag, 0.0)
    _, e = np.frexp(safe)
    e = e.astype(np.int64) - 1
    normal = (safe > 0) & (e >= fmt.min_exponent)
    sub_m = np.rint(safe / 2.0 ** (fmt.min_exponent - mb)).astype(np.int64)
    norm_m = np.rint(safe / np.exp2((e - mb).astype(np.float64))).astype(np.int64) - 2**mb
    field = np.where(normal, ((e + fmt.bias) << mb) | norm_m, sub_m)
    inf_code = (2**fmt.exponent_bits - 1) << mb
    field = np.where(np.isinf(mag), inf_code, field)
    codes = sign | field
    # NaN keeps its sign bit
    nan_sign = np.signbit(x).astype(np.int64) << (fmt.exponent_bits + mb)
    codes = np.where(np.isnan(x), nan_sign | fmt.nan_code, codes)
    return codes.astype(np.uint16 if fmt.total_bits > 8 else np.uint8)


def decode(codes, fmt: FpFormat) -> np.ndarray:
    codes = np.asarray(codes).astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= 2**fmt.total_bits):
        raise ValueError(f"code out of range for {fmt.name}")
    return fmt.table[codes]


def fp_codec(x: float, fmt: FpFormat) -> tuple[int, float]:
    """Encode one real and return ``(code, decoded value)``."""
    code = int(encode(x, fmt))
    return code, float(fmt.table[code])
