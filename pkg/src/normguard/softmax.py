"""Two-LUT exponential softmax with a shift-subtract normalising divider.

Datapath (one row of N input codes):

1. ``delta_i = max(x) - x_i``                        (max subtraction)
2. ``frac, rem = delta >> f, delta & (R-1)``         (split at the binary point)
3. ``y_i = coarse[frac] * residual[rem]``            (0 once frac >= coarse entries)
4. ``Z = sum(y)``; ``F = floor(2**(b+P) / Z)``        (restoring divider)
5. ``Y_i = floor(y_i * F / 2**P)``                   (probabilities at scale 2**b)

With ``f = log2(R)`` fraction bits on the input, ``frac`` is the integer
part of the real difference and ``rem`` counts steps of ``1/R``, so the two
tables hold ``e**-k`` and ``e**(-r/R)``.

Truncation analysis of steps 4-5.  Write ``2**(b+P) = F*Z + r`` with
``0 <= r < Z``.  Then ``sum_i y_i*F / 2**P = 2**b - r / 2**P`` exactly, and
each output floor drops ``(y_i*F mod 2**P) / 2**P`` which is zero whenever
``y_i = 0``.  Hence the deficit ``D = 2**b - sum(Y)`` satisfies

    0 <= D <= floor(((Z - 1) + nnz * (2**P - 1)) / 2**P)

where ``nnz`` counts non-zero ``y_i``.  The sum never overshoots ``2**b``.
See :func:`deficit_bound`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .fxp import (
    INT8_Q3,
    U1_15,
    FxpFormat,
    FxpValue,
    QuantTensor,
    fxp_mul,
    quantize,
    shift_subtract_divide,
    shift_subtract_divide_array,
)

Mode = Literal["float", "bit"]


class EmptyInput(ValueError):
    pass


class InternalInvariantViolation(RuntimeError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class SoftmaxConfig:
    mode: Mode = "bit"
    radix: int = 8
    coarse_entries: int = 7
    residual_entries: int | None = None
    lut_fmt: FxpFormat = U1_15
    input_fmt: FxpFormat = INT8_Q3
    out_bits: int = 15
    div_precision: int = 16

    def __post_init__(self):
        if self.residual_entries is None:
            object.__setattr__(self, "residual_entries", self.radix)
        if self.mode not in ("float", "bit"):
            raise ValueError(f"mode must be 'float' or 'bit', got {self.mode!r}")
        if not _is_pow2(self.radix):
            raise ValueError(f"radix must be a power of two, got {self.radix}")
        if self.residual_entries != self.radix:
            raise ValueError("residual_entries must equal radix")
        if self.coarse_entries < 1:
            raise ValueError("coarse_entries must be >= 1")
        if self.lut_fmt.signed or self.lut_fmt.one > self.lut_fmt.max_code:
            raise ValueError(f"lut_fmt {self.lut_fmt} cannot hold 1.0 unsigned")
        if self.out_bits < 1 or self.div_precision < 0:
            raise ValueError("out_bits >= 1 and div_precision >= 0 required")
        if self.out_bits + self.div_precision > 61:
            raise ValueError("out_bits + div_precision must fit the 62-bit divider")

    @property
    def radix_bits(self) -> int:
        return self.radix.bit_length() - 1

    @property
    def divider_width(self) -> int:
        """Numerator width of the scale divide, wide enough for Z = 1."""
        return self.out_bits + self.div_precision + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lut_fmt"] = self.lut_fmt.to_dict()
        d["input_fmt"] = self.input_fmt.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SoftmaxConfig":
        d = dict(d)
        d["lut_fmt"] = FxpFormat.from_dict(d["lut_fmt"])
        d["input_fmt"] = FxpFormat.from_dict(d["input_fmt"])
        return cls(**d)

    def with_lut_frac_bits(self, f: int) -> "SoftmaxConfig":
        """Scale the whole exponential/normalisation datapath to ``f`` fraction bits.

        The probability scale follows the table precision (``out_bits = f``),
        which is what keeps the output ulp tied to the datapath width.
        """
        return replace(self, lut_fmt=FxpFormat(f + 1, f, False), out_bits=f)


@dataclass(frozen=True)
class LutImage:
    entries: tuple[int, ...]
    fmt: FxpFormat
    kind: Literal["coarse", "residual"]
    radix: int

    def __post_init__(self):
        e = self.entries
        if not e or e[0] != self.fmt.one:
            raise ValueError(f"{self.kind} LUT entry 0 must be the 1.0 code")
        if any(b >= a for a, b in zip(e, e[1:])):
            raise ValueError(f"{self.kind} LUT in {self.fmt} is not strictly decreasing: {e}")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.int64)

    def hex_lines(self) -> list[str]:
        w = self.fmt.hex_digits
        return [f"{c:0{w}x}" for c in self.entries]

    def write_hex(self, path) -> Path:
        path = Path(path)
        path.write_text("".join(line + "\n" for line in self.hex_lines()))
        return path


def build_luts(cfg: SoftmaxConfig) -> tuple[LutImage, LutImage]:
    """Round ``e**-k`` and ``e**(-r/R)`` to ``cfg.lut_fmt`` (half-even)."""
    fmt = cfg.lut_fmt
    coarse = tuple(quantize(math.exp(-k), fmt).code for k in range(cfg.coarse_entries))
    residual = tuple(quantize(math.exp(-r / cfg.radix), fmt).code for r in range(cfg.radix))
    return (
        LutImage(coarse, fmt, "coarse", cfg.radix),
        LutImage(residual, fmt, "residual", cfg.radix),
    )


def max_subtract(row: Sequence[int]) -> list[int]:
    if len(row) == 0:
        raise EmptyInput("max_subtract: empty row")
    m = max(row)
    return [m - int(x) for x in row]


def decompose(delta: int, radix: int, frac_bits: int | None = None) -> tuple[int, int]:
    """Split a non-negative difference into (integer part, residual index).

    ``frac_bits`` is the input's fraction-bit count and defaults to
    ``log2(radix)``, in which case ``delta == radix * frac + rem``.  With
    more fraction bits the residual index keeps only the top ``log2(radix)``
    of them (truncated).
    """
    rb = radix.bit_length() - 1
    f = rb if frac_bits is None else frac_bits
    frac = delta >> f
    low = delta & ((1 << f) - 1)
    rem = low >> (f - rb) if f >= rb else low << (rb - f)
    return frac, rem


def exp_approx(delta: int, luts: tuple[LutImage, LutImage], cfg: SoftmaxConfig):
    """``e**(-delta)`` for one difference code.

    Bit mode returns a code in ``cfg.lut_fmt``; float mode returns a float
    computed from exact factor values along the same dataflow.
    """
    frac, rem = decompose(delta, cfg.radix, cfg.input_fmt.frac_bits)
    if frac >= cfg.coarse_entries:
        return 0 if cfg.mode == "bit" else 0.0
    if cfg.mode == "float":
        return math.exp(-frac) * math.exp(-rem / cfg.radix)
    coarse, residual = luts
    fmt = cfg.lut_fmt
    return fxp_mul(FxpValue(coarse[frac], fmt), FxpValue(residual[rem], fmt), fmt).code


def fxp_div_scale(z: int, cfg: SoftmaxConfig) -> int:
    """Reciprocal scale ``floor(2**b * 2**P / Z)`` with P fraction bits."""
    if z <= 0:
        raise InternalInvariantViolation(f"softmax denominator Z={z} must be positive")
    f, _ = shift_subtract_divide(1 << (cfg.out_bits + cfg.div_precision), z)
    return min(f, (1 << cfg.divider_width) - 1)


def deficit_bound(z: int, nnz: int, div_precision: int) -> int:
    """Tight upper bound on ``2**b - sum(Y)`` for one row (module docstring)."""
    return ((z - 1) + nnz * ((1 << div_precision) - 1)) >> div_precision


@dataclass
class SoftmaxRowResult:
    probs: np.ndarray
    z: float
    scale: float
    sum_error: float
    out_bits: int | None = None
    meta: dict = field(default_factory=dict)

    def prob_values(self) -> np.ndarray:
        if self.out_bits is None:
            return self.probs
        return np.ldexp(self.probs.astype(np.float64), -self.out_bits)


def _row_input(row, cfg: SoftmaxConfig):
    if isinstance(row, QuantTensor):
        if row.rows != 1:
            raise ValueError("softmax_row takes a single row")
        return row.codes[0] if cfg.mode == "bit" else row.values()[0]
    return np.asarray(row)


def softmax_row(row, cfg: SoftmaxConfig, luts=None) -> SoftmaxRowResult:
    """Scalar reference path, one element at a time through the fxp primitives.

    Bit mode takes input codes; float mode takes real values (differences
    split into integer part and exact remainder).
    """
    x = _row_input(row, cfg)
    if x.size == 0:
        raise EmptyInput("softmax_row: empty row")
    if cfg.mode == "float":
        return _softmax_row_float(x.astype(np.float64), cfg)
    luts = luts or build_luts(cfg)
    deltas = max_subtract([int(c) for c in x])
    y = [exp_approx(d, luts, cfg) for d in deltas]
    z = sum(y)
    f = fxp_div_scale(z, cfg)
    out = np.array([(yi * f) >> cfg.div_precision for yi in y], dtype=np.int64)
    total = int(out.sum())
    err = abs((1 << cfg.out_bits) - total) / (1 << cfg.out_bits)
    nnz = sum(1 for yi in y if yi)
    return SoftmaxRowResult(out, z, f, err, cfg.out_bits, {"nnz": nnz, "sum": total})


def _exp_float(delta: np.ndarray, cfg: SoftmaxConfig) -> np.ndarray:
    frac = np.floor(delta)
    rem = delta - frac
    y = np.exp(-frac) * np.exp(-rem)
    return np.where(frac >= cfg.coarse_entries, 0.0, y)


def _softmax_row_float(x: np.ndarray, cfg: SoftmaxConfig) -> SoftmaxRowResult:
    y = _exp_float(x.max() - x, cfg)
    z = float(y.sum())
    p = y / z
    return SoftmaxRowResult(p, z, 1.0 / z, abs(1.0 - float(p.sum())))


@dataclass
class SoftmaxBatchResult:
    probs: np.ndarray
    z: np.ndarray
    scale: np.ndarray
    sum_error: np.ndarray
    out_bits: int | None = None
    nnz: np.ndarray | None = None

    def prob_values(self) -> np.ndarray:
        if self.out_bits is None:
            return self.probs
        return np.ldexp(self.probs.astype(np.float64), -self.out_bits)


def softmax_batch(x, cfg: SoftmaxConfig, luts=None) -> SoftmaxBatchResult:
    """Vectorised evaluation of every row; bit-identical to :func:`softmax_row`."""
    if isinstance(x, QuantTensor):
        x = x.codes if cfg.mode == "bit" else x.values()
    x = np.atleast_2d(np.asarray(x))
    if x.shape[1] == 0:
        raise EmptyInput("softmax_batch: empty rows")
    if cfg.mode == "float":
        xf = x.astype(np.float64)
        y = _exp_float(xf.max(axis=1, keepdims=True) - xf, cfg)
        z = y.sum(axis=1)
        p = y / z[:, None]
        return SoftmaxBatchResult(p, z, 1.0 / z, np.abs(1.0 - p.sum(axis=1)))

    coarse, residual = luts or build_luts(cfg)
    codes = x.astype(np.int64)
    delta = codes.max(axis=1, keepdims=True) - codes
    f_in, rb = cfg.input_fmt.frac_bits, cfg.radix_bits
    frac = delta >> f_in
    low = delta & ((1 << f_in) - 1)
    rem = low >> (f_in - rb) if f_in >= rb else low << (rb - f_in)
    live = frac < cfg.coarse_entries
    a = coarse.as_array()[np.where(live, frac, 0)]
    b = residual.as_array()[rem]
    y = np.minimum((a * b) >> cfg.lut_fmt.frac_bits, cfg.lut_fmt.max_code)
    y = np.where(live, y, 0)
    z = y.sum(axis=1)
    if np.any(z <= 0):
        raise InternalInvariantViolation("softmax denominator must be positive")
    f, _ = shift_subtract_divide_array(
        np.int64(1) << (cfg.out_bits + cfg.div_precision), z, cfg.divider_width
    )
    f = np.minimum(f, (1 << cfg.divider_width) - 1)
    out = (y * f[:, None]) >> cfg.div_precision
    one = 1 << cfg.out_bits
    err = np.abs(one - out.sum(axis=1)) / one
    return SoftmaxBatchResult(out, z, f, err, cfg.out_bits, np.count_nonzero(y, axis=1))


def softmax_exact(row) -> np.ndarray:
    """Max-stabilised softmax in float64."""
    x = np.asarray(row, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("softmax_exact: empty row")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class SoftmaxEngine:
    """Immutable config + LUTs; safe to share across worker threads."""

    def __init__(self, cfg: SoftmaxConfig | None = None):
        self.cfg = cfg or SoftmaxConfig()
        self.luts = build_luts(self.cfg)

    def row(self, row) -> SoftmaxRowResult:
        return softmax_row(row, self.cfg, self.luts)

    def batch(self, x) -> SoftmaxBatchResult:
        return softmax_batch(x, self.cfg, self.luts)


def softmax_latency(n: int) -> int:
    """Cycles for an N-input row: one element per cycle, fully pipelined."""
    if n < 1:
        raise ValueError("N must be >= 1")
    return n
