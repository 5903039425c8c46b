"""Seeded synthetic corpora and the raw-code corpus file format.

A corpus file is a flat little-endian array of codes (row-major) next to a
JSON sidecar ``<file>.json`` holding ``rows, cols, word_bits, frac_bits,
signed``.  Element size is the smallest of 1/2/4/8 bytes covering
``word_bits``.
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .fxp import INT8_Q3, FxpFormat, QuantTensor

Generator = Literal["gaussian-logits", "uniform", "attention-like", "file"]
GENERATORS = ("gaussian-logits", "uniform", "attention-like")


class CorpusFormatError(ValueError):
    """Malformed corpus file; ``offset`` is the byte offset of the problem."""

    def __init__(self, msg: str, offset: int | None = None):
        super().__init__(msg if offset is None else f"{msg} (byte offset {offset})")
        self.offset = offset


@dataclass
class Corpus:
    tensors: list
    seed: int | None = None
    generator: str = "gaussian-logits"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tensors:
            raise ValueError("corpus must contain at least one tensor")

    @property
    def rows(self) -> int:
        return sum(np.atleast_2d(t.codes if isinstance(t, QuantTensor) else t).shape[0]
                   for t in self.tensors)

    def descriptor(self) -> dict:
        return {"generator": self.generator, "seed": self.seed, **self.params}


def _draw(generator: str, rows: int, cols: int, rng: np.random.Generator,
          fmt: FxpFormat, std: float, std_range: tuple[float, float]) -> np.ndarray:
    if generator == "gaussian-logits":
        return rng.normal(0.0, std, size=(rows, cols))
    if generator == "attention-like":
        temps = rng.uniform(std_range[0], std_range[1], size=(rows, 1))
        return rng.normal(0.0, 1.0, size=(rows, cols)) * temps
    if generator == "uniform":
        codes = rng.integers(fmt.min_code, fmt.max_code + 1, size=(rows, cols))
        return np.ldexp(codes.astype(np.float64), -fmt.frac_bits)
    raise ValueError(f"unknown generator {generator!r}; choose from {GENERATORS}")


def generate(generator: str, rows: int, cols: int, seed: int, fmt: FxpFormat = INT8_Q3,
             std: float = 2.0, std_range: tuple[float, float] = (1.0, 8.0),
             quantized: bool = True) -> Corpus:
    """Build a reproducible corpus: ``(generator, seed, shape)`` fixes the contents.

    ``attention-like`` draws a per-row standard deviation from ``std_range``,
    which spans the dynamic range typical of attention scores.  With
    ``quantized`` the values are rounded onto ``fmt`` (saturating).
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"invalid shape {rows}x{cols}")
    rng = np.random.default_rng(seed)
    x = _draw(generator, rows, cols, rng, fmt, std, tuple(std_range))
    params = {"rows": rows, "cols": cols, "std": std, "std_range": list(std_range)}
    if quantized:
        params["fmt"] = fmt.to_dict()
        return Corpus([QuantTensor.from_real(x, fmt)], seed, generator, params)
    return Corpus([x], seed, generator, params)


def _dtype_for(fmt: FxpFormat) -> np.dtype:
    nbytes = next(b for b in (1, 2, 4, 8) if 8 * b >= fmt.word_bits)
    return np.dtype(f"<{'i' if fmt.signed else 'u'}{nbytes}")


def encode(tensor: QuantTensor) -> tuple[bytes, bytes]:
    """Return ``(data, sidecar)`` bytes for a tensor."""
    data = tensor.codes.astype(_dtype_for(tensor.fmt)).tobytes()
    meta = {"rows": tensor.rows, "cols": tensor.cols, **tensor.fmt.to_dict()}
    return data, (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode()


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def atomic_write(path, data: bytes) -> bool:
    """Write via temp file + rename; skip if the file already holds ``data``.

    Returns True when the file content changed.
    """
    path = Path(path)
    if path.exists() and path.read_bytes() == data:
        return False
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return True


def write_corpus(path, tensor: QuantTensor) -> tuple[Path, Path]:
    data, meta = encode(tensor)
    path = Path(path)
    atomic_write(path, data)
    atomic_write(sidecar_path(path), meta)
    return path, sidecar_path(path)


def _parse_sidecar(raw: bytes) -> tuple[int, int, FxpFormat]:
    try:
        meta = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise CorpusFormatError("sidecar is not UTF-8", e.start) from None
    except json.JSONDecodeError as e:
        raise CorpusFormatError(f"sidecar JSON: {e.msg}", e.pos) from None
    if not isinstance(meta, dict):
        raise CorpusFormatError("sidecar must be a JSON object", 0)
    missing = [k for k in ("rows", "cols", "word_bits", "frac_bits", "signed") if k not in meta]
    if missing:
        raise CorpusFormatError(f"sidecar missing keys {missing}", 0)
    try:
        fmt = FxpFormat(int(meta["word_bits"]), int(meta["frac_bits"]), bool(meta["signed"]))
        rows, cols = int(meta["rows"]), int(meta["cols"])
    except (TypeError, ValueError) as e:
        raise CorpusFormatError(f"sidecar: {e}", 0) from None
    if rows < 1 or cols < 1:
        raise CorpusFormatError(f"sidecar shape {rows}x{cols} invalid", 0)
    return rows, cols, fmt


def decode(data: bytes, sidecar: bytes) -> QuantTensor:
    rows, cols, fmt = _parse_sidecar(sidecar)
    dt = _dtype_for(fmt)
    expected = rows * cols * dt.itemsize
    if len(data) != expected:
        raise CorpusFormatError(
            f"data holds {len(data)} bytes, sidecar implies {expected}", min(len(data), expected)
        )
    codes = np.frombuffer(data, dtype=dt).astype(np.int64)
    bad = np.flatnonzero((codes < fmt.min_code) | (codes > fmt.max_code))
    if bad.size:
        raise CorpusFormatError(f"code {codes[bad[0]]} outside {fmt}", int(bad[0]) * dt.itemsize)
    return QuantTensor(codes.reshape(rows, cols), fmt)


def read_corpus(path) -> Corpus:
    path = Path(path)
    data = path.read_bytes()
    side = sidecar_path(path).read_bytes()
    tensor = decode(data, side)
    return Corpus([tensor], None, "file", {"path": str(path), "rows": tensor.rows,
                                           "cols": tensor.cols, "fmt": tensor.fmt.to_dict()})
