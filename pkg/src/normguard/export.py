"""Serialisation of stats, sweeps and comparisons (JSON + CSV bytes).

Everything returns ``bytes`` so callers can write atomically and compare
runs byte-for-byte.  Floats go through ``repr`` which is deterministic.
"""
from __future__ import annotations

import csv
import io
import json
from typing import Iterable, Sequence

from .harness import ErrorStats, SweepPoint

SWEEP_COLUMNS = ("knob", "level", "mean_error", "max_error", "rows_evaluated")
HIST_COLUMNS = ("bin", "lower", "upper", "count")


def dumps(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n").encode()


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in r])
    return buf.getvalue().encode()


def stats_json(stats: ErrorStats) -> bytes:
    return dumps(stats.to_dict())


def stats_csv(stats: ErrorStats) -> bytes:
    return _csv(HIST_COLUMNS, stats.csv_rows())


def sweep_json(points: Sequence[SweepPoint]) -> bytes:
    return dumps([{c: getattr(p, c) for c in SWEEP_COLUMNS} for p in points])


def sweep_csv(points: Sequence[SweepPoint]) -> bytes:
    return _csv(SWEEP_COLUMNS, ([getattr(p, c) for c in SWEEP_COLUMNS] for p in points))


COMPARE_COLUMNS = ("engine", "rows_evaluated", "mean", "max", "fraction_below_2e-07",
                   "fraction_below_1e-06", "fraction_below_0.001")


def compare_json(table: Sequence[tuple[str, ErrorStats]]) -> bytes:
    return dumps([{"label": label, **st.to_dict()} for label, st in table])


def compare_csv(table: Sequence[tuple[str, ErrorStats]]) -> bytes:
    rows = []
    for label, st in table:
        fb = [st.fraction_below[t] for t in sorted(st.fraction_below)]
        rows.append([label, st.n, st.mean, st.max, *fb])
    return _csv(COMPARE_COLUMNS, rows)
