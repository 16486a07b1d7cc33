"""Run metrics and their CSV serialization."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

from scipy import stats as _scipy_stats

from .config import Mode, SimConfig, TopologyKind


def mean_ci95(values: list[float]) -> tuple[float, Optional[float], Optional[float]]:
    """Mean with a 95% t-interval; CI bounds are None for fewer than two
    samples (degenerate groups get an empty CI field in CSVs)."""
    n = len(values)
    if n == 0:
        return math.nan, None, None
    mean = sum(values) / n
    if n == 1:
        return mean, None, None
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    half = float(_scipy_stats.t.ppf(0.975, n - 1)) * math.sqrt(var / n)
    return mean, mean - half, mean + half


@dataclass
class CacheMetrics:
    name: str
    hits: int = 0
    misses: int = 0
    rww_hits: int = 0
    midgress_bytes: int = 0
    served_bytes: int = 0
    stored_bytes: int = 0

    @property
    def requests(self) -> int:
        return self.hits + self.misses + self.rww_hits

    @property
    def hit_rate(self) -> float:
        looked = self.hits + self.misses
        return self.hits / looked if looked else 0.0


@dataclass
class ClientMetrics:
    client_id: int
    video: int
    trace: int
    startup_delay_s: float
    stall_s: float
    rebuffer_ratio: float
    mean_quality_index: float
    mean_bitrate_bps: float
    delivered_bytes: int
    requested_bytes: int
    work_units: float


@dataclass
class Metrics:
    config: SimConfig
    passes: int
    sim_duration_s: float
    node_work: dict[str, float]
    caches: dict[str, CacheMetrics]
    clients: list[ClientMetrics]
    capacity_audit_ok: bool
    conservation_ok: bool
    request_log: Optional[list[tuple[float, str, str, str]]] = None

    @property
    def cache_work_total(self) -> float:
        return sum(self.node_work[c] for c in self.caches)

    @property
    def mean_cache_work(self) -> float:
        return self.cache_work_total / max(1, len(self.caches))

    @property
    def origin_work(self) -> float:
        return self.node_work.get("origin", 0.0)

    def summary_values(self) -> dict[str, float]:
        """Flat metric map used by the report tables."""
        out = {
            "mean_cache_work_units": self.mean_cache_work,
            "total_cache_work_units": self.cache_work_total,
            "origin_work_units": self.origin_work,
            "sim_duration_s": self.sim_duration_s,
        }
        for name, cm in self.caches.items():
            out[f"hit_rate[{name}]"] = cm.hit_rate
            out[f"rww_hits[{name}]"] = float(cm.rww_hits)
            out[f"requests[{name}]"] = float(cm.requests)
            out[f"midgress_bytes[{name}]"] = float(cm.midgress_bytes)
        for metric in ("rebuffer_ratio", "startup_delay_s", "mean_quality_index",
                       "mean_bitrate_bps"):
            values = [getattr(c, metric) for c in self.clients]
            mean, lo, hi = mean_ci95(values)
            out[f"client_{metric}_mean"] = mean
            if lo is not None:
                out[f"client_{metric}_ci_lo"] = lo
                out[f"client_{metric}_ci_hi"] = hi
        out["client_work_units_mean"] = (
            sum(c.work_units for c in self.clients) / max(1, len(self.clients)))
        return out

    def to_csv(self) -> str:
        cfg = self.config
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["topology", "mode", "cache_mb", "segment_duration_s",
                         "seed", "passes", "metric", "value"])
        base = [cfg.topology.value, cfg.mode.value, _num(cfg.cache_mb),
                _num(cfg.segment_duration_s), cfg.seed, self.passes]
        for key, value in sorted(self.summary_values().items()):
            writer.writerow(base + [key, _num(value)])
        writer.writerow(base + ["capacity_audit_ok", int(self.capacity_audit_ok)])
        writer.writerow(base + ["conservation_ok", int(self.conservation_ok)])
        return out.getvalue()

    def clients_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["client", "video", "trace", "startup_delay_s", "stall_s",
                         "rebuffer_ratio", "mean_quality_index", "mean_bitrate_bps",
                         "delivered_bytes", "requested_bytes", "work_units"])
        for c in self.clients:
            writer.writerow([c.client_id, c.video, c.trace, _num(c.startup_delay_s),
                             _num(c.stall_s), _num(c.rebuffer_ratio),
                             _num(c.mean_quality_index), _num(c.mean_bitrate_bps),
                             c.delivered_bytes, c.requested_bytes, _num(c.work_units)])
        return out.getvalue()

    def request_log_csv(self) -> str:
        if self.request_log is None:
            raise ValueError("run was configured without a request log")
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["timestamp", "node", "url", "result"])
        for t, node, url, result in self.request_log:
            writer.writerow([_num(t), node, url, result])
        return out.getvalue()


def _num(value) -> str:
    """Shortest round-trip decimal form; deterministic for identical floats."""
    if isinstance(value, float):
        value = float(value)  # numpy scalars repr differently
        if value == int(value) and abs(value) < 1e15:
            return str(int(value))
        return repr(value)
    return str(value)
