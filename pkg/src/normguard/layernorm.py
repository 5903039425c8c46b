"""LayerNorm with an LOD-seeded reciprocal-Newton square root.

The row is reduced to its first two moments in one pass, the variance is
range-reduced by an even power of two into ``[1, 4)``, and

    x_{k+1} = 0.5 * trunc(x_k + 1 / (x_k * n))

is iterated from a leading-one seed.  Substituting ``s = x * n`` shows this
is Heron's iteration for ``sqrt(n)``, so it converges quadratically to
``1/sqrt(n)`` from above.  The output stage multiplies by the reciprocal
estimate; there is no divide after the Newton unit.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from .fxp import (
    INT8_Q3,
    MAX_N,
    FxpFormat,
    InvalidInput,
    QuantTensor,
    leading_one_detect,
    quantize_array,
    shift_subtract_divide,
    shift_trunc,
    sum_width,
    sumsq_width,
)

Mode = Literal["float", "bit"]
EpsilonPolicy = Literal["zero-output", "add-1ulp"]

NEWTON_TOL = 2.0**-30
NEWTON_CAP = 30
BIT_DEFAULT_ITERS = 2


class ShapeError(ValueError):
    pass


class DegenerateRow(ValueError):
    pass


@dataclass(frozen=True)
class LayerNormConfig:
    mode: Mode = "bit"
    input_fmt: FxpFormat = INT8_Q3
    C: int | None = None
    # None: 2 iterations in bit mode, iterate to convergence in float mode.
    newton_iters: int | None = None
    working_fmt: FxpFormat = FxpFormat(32, 24, False)
    mean_frac_bits: int = 16
    out_fmt: FxpFormat = FxpFormat(32, 24, True)
    epsilon_policy: EpsilonPolicy = "zero-output"
    gamma: tuple[float, ...] | None = None
    beta: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("float", "bit"):
            raise ValueError(f"mode must be 'float' or 'bit', got {self.mode!r}")
        if self.C is not None and not 2 <= self.C <= MAX_N:
            raise ValueError(f"C must be in 2..{MAX_N}")
        if self.newton_iters is not None and self.newton_iters < 1:
            raise ValueError("newton_iters must be >= 1")
        if self.epsilon_policy not in ("zero-output", "add-1ulp"):
            raise ValueError(f"unknown epsilon_policy {self.epsilon_policy!r}")
        if self.working_fmt.word_bits - self.working_fmt.frac_bits < 3:
            raise ValueError("working_fmt needs >= 3 integer bits for n in [1, 4)")
        for name in ("gamma", "beta"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(t) for t in v))
                if self.C is not None and len(v) != self.C:
                    raise ShapeError(f"{name} length {len(v)} != C={self.C}")

    @property
    def affine(self) -> bool:
        return self.gamma is not None or self.beta is not None

    @property
    def iterations(self) -> int | None:
        if self.newton_iters is not None:
            return self.newton_iters
        return BIT_DEFAULT_ITERS if self.mode == "bit" else None

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("input_fmt", "working_fmt", "out_fmt"):
            d[k] = getattr(self, k).to_dict()
        for k in ("gamma", "beta"):
            d[k] = list(d[k]) if d[k] is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerNormConfig":
        d = dict(d)
        for k in ("input_fmt", "working_fmt", "out_fmt"):
            d[k] = FxpFormat.from_dict(d[k])
        return cls(**d)


@dataclass
class MomentAccumulator:
    """Running sum and sum of squares.

    Integer pushes stay exact; the declared widths (see ``widths``) are
    what a hardware accumulator needs so that C <= 4096 INT8 inputs never
    overflow.
    """

    sum_x: int | float = 0
    sum_x2: int | float = 0
    count: int = 0

    def push(self, x):
        self.sum_x += x
        self.sum_x2 += x * x
        self.count += 1

    @staticmethod
    def widths(input_bits: int = 8, max_n: int = MAX_N) -> tuple[int, int]:
        return sum_width(input_bits, max_n), sumsq_width(input_bits, max_n)


def accumulate_moments(row, C: int | None = None) -> MomentAccumulator:
    x = np.asarray(row)
    if x.ndim != 1:
        raise ShapeError(f"expected one row, got shape {x.shape}")
    if C is not None and x.size != C:
        raise ShapeError(f"row length {x.size} != C={C}")
    if np.issubdtype(x.dtype, np.integer):
        if x.size and int(np.abs(x).max()) < 1 << 24:
            xi = x.astype(np.int64)
            return MomentAccumulator(int(xi.sum()), int((xi * xi).sum()), int(xi.size))
        vals = [int(v) for v in x]
        return MomentAccumulator(sum(vals), sum(v * v for v in vals), len(vals))
    xf = x.astype(np.float64)
    return MomentAccumulator(float(xf.sum()), float((xf * xf).sum()), int(xf.size))


def _div_by_count(num: int, c: int) -> int:
    """Unsigned ``floor(num / c)``: a shift for powers of two, else the restoring divider."""
    if c & (c - 1) == 0:
        return num >> (c.bit_length() - 1)
    return shift_subtract_divide(num, c)[0]


def variance_fixed(acc: MomentAccumulator, mean_frac_bits: int = 16) -> tuple[int, int]:
    """Mean and variance codes from integer moments.

    The mean carries ``M = mean_frac_bits`` extra fraction bits over the
    input codes, the variance ``2*M``.  Division truncates toward zero.
    """
    c = acc.count
    if c < 1:
        raise ShapeError("empty accumulator")
    m = mean_frac_bits
    mag = _div_by_count(abs(acc.sum_x) << m, c)
    mean_q = -mag if acc.sum_x < 0 else mag
    msq_q = _div_by_count(acc.sum_x2 << (2 * m), c)
    return mean_q, max(msq_q - mean_q * mean_q, 0)


def variance_float(acc: MomentAccumulator) -> tuple[float, float]:
    c = acc.count
    if c < 1:
        raise ShapeError("empty accumulator")
    mean = acc.sum_x / c
    return mean, max(acc.sum_x2 / c - mean * mean, 0.0)


def lod_initial_guess(n: float) -> float:
    """``2**-floor((L+1)/2)`` where ``2**L <= n < 2**(L+1)``.

    Within a factor sqrt(2) of ``1/sqrt(n)`` for every positive n.
    """
    if not n > 0:
        raise InvalidInput(f"initial guess needs n > 0, got {n}")
    _, e = math.frexp(n)  # n = m * 2**e, m in [0.5, 1), so L = e - 1
    return math.ldexp(1.0, -(e // 2))


def lod_initial_guess_code(n_code: int, fmt: FxpFormat) -> int:
    if n_code <= 0:
        raise InvalidInput(f"initial guess needs n > 0, got code {n_code}")
    level = leading_one_detect(n_code) - fmt.frac_bits
    shift = fmt.frac_bits - (level + 1) // 2
    if shift < 0 or (1 << shift) > fmt.max_code:
        raise InvalidInput(f"seed for code {n_code} not representable in {fmt}")
    return 1 << shift


def newton_rsqrt_float(n: float, iters: int | None = None, x0: float | None = None,
                       tol: float = NEWTON_TOL, cap: int = NEWTON_CAP) -> tuple[float, int]:
    """Iterate toward ``1/sqrt(n)`` in float64.

    Runs exactly ``iters`` steps, or until consecutive iterates differ by at
    most ``tol`` (at most ``cap`` steps).  Returns ``(x, steps)``.
    """
    if not n > 0:
        raise InvalidInput(f"newton_rsqrt needs n > 0, got {n}")
    x = lod_initial_guess(n) if x0 is None else x0
    if iters is not None:
        for _ in range(iters):
            x = 0.5 * (x + 1.0 / (x * n))
        return x, iters
    for k in range(1, cap + 1):
        nxt = 0.5 * (x + 1.0 / (x * n))
        if abs(nxt - x) <= tol:
            return nxt, k
        x = nxt
    return x, cap


def newton_step_fixed(x: int, n: int, fmt: FxpFormat) -> int:
    f = fmt.frac_bits
    xn = (x * n) >> f
    if xn == 0:
        raise InvalidInput("x*n underflowed the working format")
    recip, _ = shift_subtract_divide(1 << (2 * f), xn)
    s, _ = fmt.saturate(x + recip)
    return s >> 1


def newton_rsqrt_fixed(n_code: int, fmt: FxpFormat, iters: int = BIT_DEFAULT_ITERS,
                       x0: int | None = None) -> int:
    """Bit-accurate iteration on codes in ``fmt``: truncating product,
    restoring-divider reciprocal, then a one-bit shift for the halving."""
    if n_code <= 0:
        raise InvalidInput(f"newton_rsqrt needs n > 0, got code {n_code}")
    x = lod_initial_guess_code(n_code, fmt) if x0 is None else x0
    for _ in range(iters):
        x = newton_step_fixed(x, n_code, fmt)
    return x


def newton_rsqrt(n, cfg: LayerNormConfig):
    if cfg.mode == "float":
        return newton_rsqrt_float(float(n), cfg.iterations)[0]
    return newton_rsqrt_fixed(int(n), cfg.working_fmt, cfg.iterations)


def range_reduce_float(var: float) -> tuple[float, int]:
    """Return ``(n, k)`` with ``var = n * 4**k`` and ``1 <= n < 4``."""
    _, e = math.frexp(var)
    k = (e - 1) // 2
    return math.ldexp(var, -2 * k), k


def range_reduce_fixed(var_code: int, var_frac: int, fmt: FxpFormat) -> tuple[int, int]:
    """Same as :func:`range_reduce_float` on a code with ``var_frac`` fraction
    bits; ``n`` is returned as a (truncated) code in ``fmt``."""
    level = leading_one_detect(var_code) - var_frac
    k = level // 2
    return shift_trunc(var_code, var_frac + 2 * k - fmt.frac_bits), k


@dataclass
class LayerNormRowResult:
    out: np.ndarray
    mean: float
    var: float
    rsqrt_est: float
    sigma_error: float
    degenerate: bool = False
    iterations: int = 0
    out_frac_bits: int | None = None
    meta: dict = field(default_factory=dict)

    def values(self) -> np.ndarray:
        if self.out_frac_bits is None:
            return self.out
        return np.ldexp(self.out.astype(np.float64), -self.out_frac_bits)


def _sigma_error(v: np.ndarray) -> float:
    return abs(1.0 - float(np.std(v)))


def _check_row(x: np.ndarray, cfg: LayerNormConfig):
    if x.ndim != 1:
        raise ShapeError(f"expected one row, got shape {x.shape}")
    if x.size < 2:
        raise ShapeError("LayerNorm needs at least 2 elements")
    if cfg.C is not None and x.size != cfg.C:
        raise ShapeError(f"row length {x.size} != C={cfg.C}")
    for name in ("gamma", "beta"):
        v = getattr(cfg, name)
        if v is not None and len(v) != x.size:
            raise ShapeError(f"{name} length {len(v)} != row length {x.size}")


def layernorm_row(row, cfg: LayerNormConfig) -> LayerNormRowResult:
    """Normalise one row; bit mode takes input codes, float mode real values."""
    if isinstance(row, QuantTensor):
        row = row.codes[0] if cfg.mode == "bit" else row.values()[0]
    x = np.asarray(row)
    _check_row(x, cfg)
    if cfg.mode == "float":
        return _layernorm_float(x.astype(np.float64), cfg)
    return _layernorm_bit(x.astype(np.int64), cfg)


def _layernorm_float(x: np.ndarray, cfg: LayerNormConfig) -> LayerNormRowResult:
    mean, var = variance_float(accumulate_moments(x))
    c = x.size
    if var <= 0.0 or x.max() == x.min():
        out = np.zeros(c) if cfg.beta is None else np.array(cfg.beta)
        return LayerNormRowResult(out, mean, 0.0, math.inf, 1.0, degenerate=True)
    n, k = range_reduce_float(var)
    r, steps = newton_rsqrt_float(n, cfg.iterations)
    rsqrt = math.ldexp(r, -k)
    y = (x - mean) * rsqrt
    err = _sigma_error(y)
    if cfg.gamma is not None:
        y = y * np.asarray(cfg.gamma)
    if cfg.beta is not None:
        y = y + np.asarray(cfg.beta)
    return LayerNormRowResult(y, mean, var, rsqrt, err, iterations=steps)


def _affine_codes(name: str, vals, fmt: FxpFormat) -> np.ndarray:
    codes, n_sat = quantize_array(vals, fmt)
    if n_sat:
        raise ValueError(f"{name} saturates {fmt}")
    return codes


def _trunc_shift_array(p: np.ndarray, sh: int) -> np.ndarray:
    if sh <= 0:
        return p << -sh
    return np.sign(p) * (np.abs(p) >> sh)


def _layernorm_bit(x: np.ndarray, cfg: LayerNormConfig) -> LayerNormRowResult:
    f_in = cfg.input_fmt.frac_bits
    m = cfg.mean_frac_bits
    wf = cfg.working_fmt
    of = cfg.out_fmt
    c = x.size
    acc = accumulate_moments(x)
    mean_q, var_q = variance_fixed(acc, m)
    mean = math.ldexp(mean_q, -(f_in + m))
    degenerate = var_q == 0
    if degenerate and cfg.epsilon_policy == "zero-output":
        if cfg.beta is None:
            out = np.zeros(c, dtype=np.int64)
        else:
            out = _affine_codes("beta", cfg.beta, of)
        return LayerNormRowResult(out, mean, 0.0, math.inf, 1.0, True, 0, of.frac_bits)
    if degenerate:
        var_q = 1
    var_frac = 2 * (f_in + m)
    n_code, k = range_reduce_fixed(var_q, var_frac, wf)
    iters = cfg.iterations
    r_code = newton_rsqrt_fixed(n_code, wf, iters)

    d = (x << m) - mean_q
    if int(np.abs(d).max()) * r_code >= 1 << 62:
        raise OverflowError("normalisation product exceeds 62 bits")
    sh = (f_in + m) + wf.frac_bits + k - of.frac_bits
    y = np.clip(_trunc_shift_array(d * r_code, sh), of.min_code, of.max_code)
    err = _sigma_error(np.ldexp(y.astype(np.float64), -of.frac_bits))
    if cfg.gamma is not None:
        g = _affine_codes("gamma", cfg.gamma, of)
        y = np.clip(_trunc_shift_array(y * g, of.frac_bits), of.min_code, of.max_code)
    if cfg.beta is not None:
        y = np.clip(y + _affine_codes("beta", cfg.beta, of), of.min_code, of.max_code)
    return LayerNormRowResult(
        y,
        mean,
        math.ldexp(var_q, -var_frac),
        math.ldexp(r_code, -(wf.frac_bits + k)),
        err,
        degenerate,
        iters,
        of.frac_bits,
        {"mean_code": mean_q, "var_code": var_q, "rsqrt_code": r_code, "k": k},
    )


def layernorm_exact(row, gamma=None, beta=None) -> np.ndarray:
    """``(x - mu) / sigma * gamma + beta`` with population variance, float64."""
    x = np.asarray(row, dtype=np.float64)
    if x.size < 2:
        raise ShapeError("LayerNorm needs at least 2 elements")
    mu = x.mean()
    d = x - mu
    sigma = math.sqrt(float(np.mean(d * d)))
    if sigma == 0.0:
        raise DegenerateRow("zero variance row")
    y = d / sigma
    if gamma is not None:
        y = y * np.asarray(gamma, dtype=np.float64)
    if beta is not None:
        y = y + np.asarray(beta, dtype=np.float64)
    return y


class LayerNormEngine:
    def __init__(self, cfg: LayerNormConfig | None = None):
        self.cfg = cfg or LayerNormConfig()

    def row(self, row) -> LayerNormRowResult:
        return layernorm_row(row, self.cfg)

    def batch(self, x) -> list[LayerNormRowResult]:
        if isinstance(x, QuantTensor):
            x = x.codes if self.cfg.mode == "bit" else x.values()
        return [layernorm_row(r, self.cfg) for r in np.atleast_2d(x)]


def layernorm_latency(n: int) -> int:
    """N accumulate cycles plus one for the Newton/normalise stage."""
    if n < 2:
        raise ValueError("N must be >= 2")
    return n + 1
