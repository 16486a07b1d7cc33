"""Deterministic CDN delivery simulator: fluid-flow network, LRU caches with
read-while-write, DASH-like clients, and the HTTPS vs HTTP+ABE cost model."""

from .config import (  # noqa: F401
    ConfigError, CostModel, Mode, SimConfig, Topology, TopologyKind, Workload,
    build_topology, workload_for,
)
from .cache import CacheState, LookupResult, cache_lookup  # noqa: F401
from .dataset import DatasetSpec, ObjectInfo, SizeModel  # noqa: F401
from .engine import run  # noqa: F401
from .metrics import Metrics, mean_ci95  # noqa: F401
from .playback import ClientPlayback, abr_select, playback_step  # noqa: F401
from .workload import sample_arrivals, sample_video, zipf_pmf  # noqa: F401
