"""Aggregation of per-run metrics CSVs into figure-ready tables."""

from __future__ import annotations

import csv
import io
from collections import OrderedDict

from .metrics import mean_ci95


def parse_metrics_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    expected = ["topology", "mode", "cache_mb", "segment_duration_s", "seed",
                "passes", "metric", "value"]
    if reader.fieldnames != expected:
        raise ValueError(f"bad metrics header: {reader.fieldnames}")
    return list(reader)


def aggregate(rows: list[dict]) -> str:
    """One output row per (topology, mode, cache_mb, segment_duration, metric)
    with the mean and 95% CI over the contributing runs (seeds/repeats); a
    single-sample group leaves the CI fields empty."""
    if not rows:
        raise ValueError("no metric rows to aggregate")
    groups: "OrderedDict[tuple, list[float]]" = OrderedDict()
    for row in rows:
        key = (row["topology"], row["mode"], row["cache_mb"],
               row["segment_duration_s"], row["metric"])
        groups.setdefault(key, []).append(float(row["value"]))
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["topology", "mode", "cache_mb", "segment_duration_s",
                     "metric", "n", "mean", "ci_lo", "ci_hi"])
    for key in sorted(groups):
        values = groups[key]
        mean, lo, hi = mean_ci95(values)
        writer.writerow(list(key) + [len(values), _fmt(mean),
                                     _fmt(lo) if lo is not None else "",
                                     _fmt(hi) if hi is not None else ""])
    return out.getvalue()


def _fmt(value: float) -> str:
    value = float(value)  # numpy scalars repr differently
    if value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)
