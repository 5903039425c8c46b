"""Fixed-point primitives shared by the softmax and layernorm golden models.

Everything here operates on plain Python integers (unbounded), so the
hardware widths are enforced explicitly by saturation rather than by the
host integer type.  Array variants for the hot paths live next to their
scalar counterparts and are required to be bit-identical to them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

Rounding = Literal["nearest-even", "truncate"]

# Largest row length the accumulators are sized for.
MAX_N = 4096


class DivideByZero(ZeroDivisionError):
    pass


class InvalidInput(ValueError):
    pass


@dataclass(frozen=True)
class FxpFormat:
    """Word width, fraction bits and signedness of a fixed-point code."""

    word_bits: int
    frac_bits: int
    signed: bool = False

    def __post_init__(self):
        if not 4 <= self.word_bits <= 64:
            raise ValueError(f"word_bits must be in 4..64, got {self.word_bits}")
        if not 0 <= self.frac_bits <= self.word_bits:
            raise ValueError(f"frac_bits must be in 0..word_bits, got {self.frac_bits}")

    @property
    def min_code(self) -> int:
        return -(1 << (self.word_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        return (1 << (self.word_bits - 1)) - 1 if self.signed else (1 << self.word_bits) - 1

    @property
    def one(self) -> int:
        """Code of 1.0 (may exceed max_code for formats without integer bits)."""
        return 1 << self.frac_bits

    @property
    def hex_digits(self) -> int:
        return -(-self.word_bits // 4)

    def contains(self, code: int) -> bool:
        return self.min_code <= code <= self.max_code

    def saturate(self, code: int) -> tuple[int, bool]:
        if code > self.max_code:
            return self.max_code, True
        if code < self.min_code:
            return self.min_code, True
        return code, False

    def __str__(self):
        return f"{'S' if self.signed else 'U'}{self.word_bits}.{self.frac_bits}"

    def to_dict(self) -> dict:
        return {"word_bits": self.word_bits, "frac_bits": self.frac_bits, "signed": self.signed}

    @classmethod
    def from_dict(cls, d: dict) -> "FxpFormat":
        return cls(int(d["word_bits"]), int(d["frac_bits"]), bool(d["signed"]))


# Signed INT8 with 3 fraction bits: the engines' default input format.
INT8_Q3 = FxpFormat(8, 3, signed=True)
# Unsigned 16-bit with 15 fraction bits: 1.0 is exactly representable.
U1_15 = FxpFormat(16, 15, signed=False)


@dataclass(frozen=True)
class FxpValue:
    code: int
    fmt: FxpFormat
    saturated: bool = field(default=False, compare=False)

    def __post_init__(self):
        if not self.fmt.contains(self.code):
            raise ValueError(f"code {self.code} outside {self.fmt}")

    @property
    def value(self) -> float:
        return dequantize(self)


def _round_scaled(scaled: float, rounding: Rounding) -> int:
    if rounding == "nearest-even":
        # Python's round() on floats is round-half-even.
        return int(round(scaled))
    if rounding == "truncate":
        return math.trunc(scaled)
    raise ValueError(f"unknown rounding {rounding!r}")


def quantize(x: float, fmt: FxpFormat, rounding: Rounding = "nearest-even") -> FxpValue:
    """Round ``x`` onto ``fmt``'s grid, saturating out-of-range results.

    The scaling by ``2**frac_bits`` is exact for binary floats, so the only
    rounding step is the one selected by ``rounding``.
    """
    if math.isnan(x):
        raise InvalidInput("cannot quantize NaN")
    if math.isinf(x):
        code, sat = (fmt.max_code if x > 0 else fmt.min_code), True
    else:
        code, sat = fmt.saturate(_round_scaled(math.ldexp(x, fmt.frac_bits), rounding))
    return FxpValue(code, fmt, sat)


def quantize_array(x, fmt: FxpFormat, rounding: Rounding = "nearest-even"):
    """Vectorised :func:`quantize`. Returns ``(codes, n_saturated)``."""
    scaled = np.ldexp(np.asarray(x, dtype=np.float64), fmt.frac_bits)
    if np.isnan(scaled).any():
        raise InvalidInput("cannot quantize NaN")
    if rounding == "nearest-even":
        r = np.rint(scaled)
    elif rounding == "truncate":
        r = np.trunc(scaled)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    lo, hi = fmt.min_code, fmt.max_code
    n_sat = int(np.count_nonzero((r < lo) | (r > hi)))
    return np.clip(r, lo, hi).astype(np.int64), n_sat


def dequantize(v: FxpValue) -> float:
    return math.ldexp(v.code, -v.fmt.frac_bits)


def shift_trunc(x: int, shift: int) -> int:
    """Scale ``x`` by ``2**-shift``, truncating toward zero when shift > 0."""
    if shift <= 0:
        return x << -shift
    if x >= 0:
        return x >> shift
    return -((-x) >> shift)


def fxp_mul(a: FxpValue, b: FxpValue, out_fmt: FxpFormat) -> FxpValue:
    """Full-precision product re-aligned to ``out_fmt`` by truncation toward zero."""
    prod = a.code * b.code
    shift = a.fmt.frac_bits + b.fmt.frac_bits - out_fmt.frac_bits
    code, sat = out_fmt.saturate(shift_trunc(prod, shift))
    return FxpValue(code, out_fmt, sat)


def fxp_add(a: FxpValue, b: FxpValue, out_fmt: FxpFormat) -> FxpValue:
    f = max(a.fmt.frac_bits, b.fmt.frac_bits)
    s = (a.code << (f - a.fmt.frac_bits)) + (b.code << (f - b.fmt.frac_bits))
    code, sat = out_fmt.saturate(shift_trunc(s, f - out_fmt.frac_bits))
    return FxpValue(code, out_fmt, sat)


def shift_subtract_divide(numerator: int, denominator: int) -> tuple[int, int]:
    """Bit-serial restoring division, MSB first.

    One trial subtraction per numerator bit; the quotient bit is set when
    the partial remainder is at least the divisor.
    """
    if denominator == 0:
        raise DivideByZero("shift_subtract_divide: denominator is zero")
    if numerator < 0 or denominator < 0:
        raise InvalidInput("shift_subtract_divide operates on unsigned integers")
    quotient = 0
    rem = 0
    for i in range(numerator.bit_length() - 1, -1, -1):
        rem = (rem << 1) | ((numerator >> i) & 1)
        quotient <<= 1
        if rem >= denominator:
            rem -= denominator
            quotient |= 1
    return quotient, rem


def shift_subtract_divide_array(numerator, denominator, width: int = 32):
    """Element-wise restoring division over ``width`` numerator bits.

    Operands must be non-negative, ``numerator < 2**width <= 2**62`` and
    ``denominator < 2**61`` so the partial remainder fits in int64.
    """
    num = np.asarray(numerator, dtype=np.int64)
    den = np.asarray(denominator, dtype=np.int64)
    num, den = np.broadcast_arrays(num, den)
    if np.any(den == 0):
        raise DivideByZero("shift_subtract_divide_array: zero denominator")
    if np.any(num < 0) or np.any(den < 0) or not 1 <= width <= 62:
        raise InvalidInput("unsigned operands and 1 <= width <= 62 required")
    if np.any(num >> width):
        raise InvalidInput(f"numerator exceeds {width} bits")
    quotient = np.zeros(num.shape, dtype=np.int64)
    rem = np.zeros(num.shape, dtype=np.int64)
    for i in range(width - 1, -1, -1):
        rem = (rem << 1) | ((num >> i) & 1)
        ge = rem >= den
        rem = np.where(ge, rem - den, rem)
        quotient = (quotient << 1) | ge.astype(np.int64)
    return quotient, rem


def leading_one_detect(n: int) -> int:
    """Index L of the most significant set bit: ``2**L <= n < 2**(L+1)``."""
    if n <= 0:
        raise InvalidInput(f"leading_one_detect needs n > 0, got {n}")
    return n.bit_length() - 1


def sum_width(input_bits: int, max_n: int = MAX_N) -> int:
    """Accumulator width that cannot overflow summing ``max_n`` inputs."""
    return input_bits + math.ceil(math.log2(max_n))


def sumsq_width(input_bits: int, max_n: int = MAX_N) -> int:
    return 2 * input_bits + math.ceil(math.log2(max_n))


@dataclass(frozen=True, eq=False)
class QuantTensor:
    """Row-major 2-D block of fixed-point codes."""

    codes: np.ndarray
    fmt: FxpFormat

    def __post_init__(self):
        if self.fmt.word_bits == 64 and not self.fmt.signed:
            raise ValueError("QuantTensor stores int64 codes; unsigned 64-bit formats do not fit")
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes.reshape(1, -1)
        if codes.ndim != 2:
            raise ValueError(f"QuantTensor needs 2-D codes, got shape {codes.shape}")
        if codes.size and (codes.min() < self.fmt.min_code or codes.max() > self.fmt.max_code):
            raise ValueError(f"codes outside {self.fmt}")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def values(self) -> np.ndarray:
        return np.ldexp(self.codes.astype(np.float64), -self.fmt.frac_bits)

    @classmethod
    def from_real(cls, x, fmt: FxpFormat, rounding: Rounding = "nearest-even") -> "QuantTensor":
        codes, _ = quantize_array(x, fmt, rounding)
        return cls(codes, fmt)

    def __eq__(self, other):
        if not isinstance(other, QuantTensor):
            return NotImplemented
        return self.fmt == other.fmt and np.array_equal(self.codes, other.codes)
