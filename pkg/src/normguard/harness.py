"""Normalisation-error measurement: per-row errors, histograms, sweeps, contrasts.

Rows are evaluated in fixed-size chunks that may run on worker threads;
chunk results are reassembled by chunk index, so every statistic is
bit-identical at any ``jobs`` value.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np

from .corpus import Corpus
from .fxp import QuantTensor, quantize_array
from .layernorm import LayerNormConfig, ShapeError, layernorm_exact, layernorm_row, layernorm_latency
from .softmax import EmptyInput, SoftmaxConfig, build_luts, softmax_batch, softmax_exact, softmax_latency

HIST_BINS = 64
HIST_LO, HIST_HI = 1e-12, 1e-1
THRESHOLDS = (0.2e-6, 1e-6, 1e-3)
CHUNK_ROWS = 512

KNOBS = ("residual_entries", "lut_frac_bits", "newton_iters", "div_precision")


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineConfig:
    """Reference engines with no fixed-point datapath."""

    kind: Literal["softmax-exact", "softmax-base2", "layernorm-exact"]

    def to_dict(self) -> dict:
        return {"kind": self.kind}


EngineConfig = SoftmaxConfig | LayerNormConfig | BaselineConfig


def engine_label(cfg: EngineConfig) -> str:
    if isinstance(cfg, BaselineConfig):
        return cfg.kind
    kind = "softmax" if isinstance(cfg, SoftmaxConfig) else "layernorm"
    return f"{kind}-{cfg.mode}"


def engine_family(cfg: EngineConfig) -> str:
    return engine_label(cfg).split("-")[0]


# ---------------------------------------------------------------- metrics

def softmax_norm_error(probs) -> float:
    """``|1 - sum(p)|`` with a correctly rounded sum."""
    return abs(1.0 - math.fsum(np.asarray(probs, dtype=np.float64).ravel()))


def layernorm_norm_error(out) -> float:
    """``|1 - sigma|`` for the population standard deviation of ``out``."""
    v = np.asarray(out, dtype=np.float64)
    if v.size < 2:
        raise ShapeError("layernorm_norm_error needs at least 2 values")
    return abs(1.0 - float(np.std(v)))


def base2_unnormalized_softmax(row) -> np.ndarray:
    """Base-2 softmax whose denominator is truncated to a power of two.

    Normalisation becomes a shift, so ``sum(p)`` lands anywhere in
    ``[1, 2)``: the contrast case for guaranteed-normalisation engines.
    """
    x = np.asarray(row, dtype=np.float64)
    if x.size == 0:
        raise EmptyInput("base2_unnormalized_softmax: empty row")
    num = np.exp2(x - x.max(axis=-1, keepdims=True))
    z = num.sum(axis=-1, keepdims=True)
    return num / np.exp2(np.floor(np.log2(z)))


# ---------------------------------------------------------------- row evaluation

def _values(tensor) -> np.ndarray:
    if isinstance(tensor, QuantTensor):
        return tensor.values()
    return np.atleast_2d(np.asarray(tensor, dtype=np.float64))


def _codes(tensor, fmt) -> np.ndarray:
    if isinstance(tensor, QuantTensor) and tensor.fmt == fmt:
        return tensor.codes
    return quantize_array(_values(tensor), fmt)[0]


def _eval_chunk(block: np.ndarray, cfg: EngineConfig, luts) -> tuple[np.ndarray, np.ndarray]:
    """Errors and validity mask for a chunk already in the engine's input domain."""
    n = block.shape[0]
    valid = np.ones(n, dtype=bool)
    if isinstance(cfg, SoftmaxConfig):
        return softmax_batch(block, cfg, luts).sum_error, valid
    if isinstance(cfg, BaselineConfig):
        if cfg.kind == "softmax-exact":
            p = softmax_exact(block)
            return np.array([softmax_norm_error(r) for r in p]), valid
        if cfg.kind == "softmax-base2":
            p = base2_unnormalized_softmax(block)
            return np.array([softmax_norm_error(r) for r in p]), valid
        errs = np.zeros(n)
        for i, r in enumerate(block):
            if r.max() == r.min():
                valid[i] = False
                continue
            errs[i] = layernorm_norm_error(layernorm_exact(r))
        return errs, valid
    errs = np.zeros(n)
    for i, r in enumerate(block):
        res = layernorm_row(r, cfg)
        errs[i] = res.sigma_error
        valid[i] = not res.degenerate
    return errs, valid


def row_errors(corpus: Corpus, cfg: EngineConfig, jobs: int = 1,
               chunk_rows: int = CHUNK_ROWS) -> tuple[np.ndarray, np.ndarray]:
    """Per-row normalisation errors over every tensor, in corpus order."""
    luts = build_luts(cfg) if isinstance(cfg, SoftmaxConfig) and cfg.mode == "bit" else None
    chunks = []
    for t in corpus.tensors:
        if isinstance(cfg, BaselineConfig) or cfg.mode == "float":
            x = _values(t)
        else:
            x = _codes(t, cfg.input_fmt)
        chunks.extend(x[i:i + chunk_rows] for i in range(0, x.shape[0], chunk_rows))
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            parts = list(ex.map(lambda b: _eval_chunk(b, cfg, luts), chunks))
    else:
        parts = [_eval_chunk(b, cfg, luts) for b in chunks]
    errs = np.concatenate([p[0] for p in parts])
    valid = np.concatenate([p[1] for p in parts])
    return errs, valid


# ---------------------------------------------------------------- statistics

def hist_edges(bins: int = HIST_BINS, lo: float = HIST_LO, hi: float = HIST_HI) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), bins + 1)


@dataclass
class ErrorStats:
    samples: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int
    fraction_below: dict[float, float]
    mean: float
    max: float
    rows_skipped: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.samples.size)

    @classmethod
    def from_samples(cls, samples, edges=None, thresholds=THRESHOLDS, rows_skipped=0,
                     meta=None) -> "ErrorStats":
        s = np.asarray(samples, dtype=np.float64)
        if s.size and (np.isnan(s).any() or s.min() < 0):
            raise ValueError("error samples must be finite and non-negative")
        edges = hist_edges() if edges is None else np.asarray(edges, dtype=np.float64)
        # Bin i covers [edges[i], edges[i+1]); below edges[0] underflows, at or above edges[-1] overflows.
        idx = np.searchsorted(edges, s, side="right") - 1
        nb = edges.size - 1
        counts = np.bincount(idx[(idx >= 0) & (idx < nb)], minlength=nb).astype(np.int64)
        under = int(np.count_nonzero(idx < 0))
        over = int(np.count_nonzero(idx >= nb))
        n = s.size
        fb = {t: (float(np.count_nonzero(s < t)) / n if n else 0.0) for t in thresholds}
        return cls(s, edges, counts, under, over, fb,
                   float(s.mean()) if n else 0.0, float(s.max()) if n else 0.0,
                   rows_skipped, dict(meta or {}))

    def to_dict(self) -> dict:
        return {
            "rows_evaluated": self.n,
            "rows_skipped": self.rows_skipped,
            "mean": self.mean,
            "max": self.max,
            "fraction_below": {repr(t): f for t, f in self.fraction_below.items()},
            "histogram": {
                "edges": [float(e) for e in self.edges],
                "counts": [int(c) for c in self.counts],
                "underflow": self.underflow,
                "overflow": self.overflow,
            },
            **self.meta,
        }

    def csv_rows(self) -> list[tuple]:
        rows = [("underflow", 0.0, float(self.edges[0]), self.underflow)]
        rows += [(i, float(self.edges[i]), float(self.edges[i + 1]), int(c))
                 for i, c in enumerate(self.counts)]
        rows.append(("overflow", float(self.edges[-1]), math.inf, self.overflow))
        return rows


def _row_length(corpus: Corpus) -> int:
    t = corpus.tensors[0]
    return (t.cols if isinstance(t, QuantTensor) else np.atleast_2d(t).shape[1])


def run_distribution(corpus: Corpus, cfg: EngineConfig, jobs: int = 1) -> ErrorStats:
    """Evaluate every row and summarise the error distribution.

    Degenerate LayerNorm rows (zero variance) are excluded from the samples
    and counted in ``rows_skipped``.
    """
    errs, valid = row_errors(corpus, cfg, jobs)
    n = _row_length(corpus)
    fam = engine_family(cfg)
    meta = {
        "engine": engine_label(cfg),
        "config": cfg.to_dict(),
        "row_length": n,
        "latency_cycles": softmax_latency(n) if fam == "softmax" else layernorm_latency(max(n, 2)),
    }
    return ErrorStats.from_samples(errs[valid], rows_skipped=int((~valid).sum()), meta=meta)


@dataclass(frozen=True)
class SweepPoint:
    knob: str
    level: int
    mean_error: float
    max_error: float
    rows_evaluated: int


def apply_knob(cfg: EngineConfig, knob: str, level: int) -> EngineConfig:
    if knob == "newton_iters":
        if not isinstance(cfg, LayerNormConfig):
            raise UsageError("newton_iters applies to LayerNorm engines")
        return replace(cfg, newton_iters=int(level))
    if not isinstance(cfg, SoftmaxConfig):
        raise UsageError(f"{knob} applies to softmax engines")
    if knob == "residual_entries":
        return replace(cfg, radix=int(level), residual_entries=int(level))
    if knob == "lut_frac_bits":
        return cfg.with_lut_frac_bits(int(level))
    if knob == "div_precision":
        return replace(cfg, div_precision=int(level))
    raise UsageError(f"unknown knob {knob!r}; choose from {KNOBS}")


def default_engine_for(knob: str) -> EngineConfig:
    if knob not in KNOBS:
        raise UsageError(f"unknown knob {knob!r}; choose from {KNOBS}")
    return LayerNormConfig() if knob == "newton_iters" else SoftmaxConfig()


def run_sweep(corpus: Corpus, knob: str, levels: Sequence[int],
              base_cfg: EngineConfig | None = None, jobs: int = 1) -> list[SweepPoint]:
    """One full distribution per level on the same corpus."""
    levels = list(levels)
    if len(levels) < 2:
        raise UsageError("a sweep needs at least 2 levels")
    diffs = np.diff(levels)
    if not (np.all(diffs > 0) or np.all(diffs < 0)):
        raise UsageError("sweep levels must be strictly ordered")
    base = base_cfg if base_cfg is not None else default_engine_for(knob)
    out = []
    for lv in levels:
        st = run_distribution(corpus, apply_knob(base, knob, lv), jobs)
        out.append(SweepPoint(knob, lv, st.mean, st.max, st.n))
    return out


def compare_engines(corpus: Corpus, cfgs: Sequence[EngineConfig],
                    jobs: int = 1) -> list[tuple[str, ErrorStats]]:
    if len(cfgs) < 2:
        raise UsageError("compare_engines needs at least 2 configs")
    return [(engine_label(c), run_distribution(corpus, c, jobs)) for c in cfgs]
