"""Run configuration: topologies, workload, CPU cost model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

MBPS = 1_000_000  # bits per second


class ConfigError(Exception):
    pass


class TopologyKind(Enum):
    SMALL_SCALE = "small"
    LARGE_SCALE = "large"


class Mode(Enum):
    HTTPS = "https"
    ABE_MAJOR_P = "abe-majorP"
    ABE_ALL_IP = "abe-alliP"

    @property
    def is_abe(self) -> bool:
        return self is not Mode.HTTPS


@dataclass(frozen=True)
class Link:
    child: str
    parent: str
    bandwidth_bps: float


@dataclass(frozen=True)
class Topology:
    kind: TopologyKind
    links: tuple[Link, ...]  # topological order, origin-side first
    clients_per_node: int
    client_nodes: tuple[str, ...]
    cache_nodes: tuple[str, ...]

    @property
    def nodes(self) -> tuple[str, ...]:
        return ("origin",) + self.cache_nodes + self.client_nodes

    @property
    def client_count(self) -> int:
        return self.clients_per_node * len(self.client_nodes)

    def parent_of(self, node: str) -> str:
        for link in self.links:
            if link.child == node:
                return link.parent
        raise ConfigError(f"node {node!r} has no uplink")


def build_topology(kind: TopologyKind,
                   origin_bw_bps: Optional[float] = None) -> Topology:
    """The two experiment networks.

    Small scale: origin--cache at 120 Mbps (one third of total client demand),
    cache to each of five client nodes at 72 Mbps, six clients per node.
    Large scale: origin--L1 at 320 Mbps, L1 to each of two L2 caches at
    160 Mbps, and each L2 cache 240 Mbps of downstream capacity shared by its
    two client nodes (120 Mbps per node link, 480 Mbps across both L2s),
    twenty clients per node.  ``origin_bw_bps`` overrides the origin uplink
    (None keeps the default; use a huge value for the uncapped variant).
    """
    if kind is TopologyKind.SMALL_SCALE:
        origin_bw = 120 * MBPS if origin_bw_bps is None else origin_bw_bps
        links = [Link("cache", "origin", origin_bw)]
        client_nodes = tuple(f"cn{i}" for i in range(5))
        links += [Link(cn, "cache", 72 * MBPS) for cn in client_nodes]
        return Topology(kind, tuple(links), 6, client_nodes, ("cache",))
    if kind is TopologyKind.LARGE_SCALE:
        origin_bw = 320 * MBPS if origin_bw_bps is None else origin_bw_bps
        links = [Link("l1", "origin", origin_bw),
                 Link("l2a", "l1", 160 * MBPS), Link("l2b", "l1", 160 * MBPS)]
        client_nodes = tuple(f"cn{i}" for i in range(4))
        for i, cn in enumerate(client_nodes):
            links.append(Link(cn, "l2a" if i < 2 else "l2b", 120 * MBPS))
        return Topology(kind, tuple(links), 20, client_nodes, ("l1", "l2a", "l2b"))
    raise ConfigError(f"unknown topology kind {kind!r}")


@dataclass(frozen=True)
class CostModel:
    """Abstract CPU cost coefficients.

    Work units are arbitrary; one unit is pegged to moving one byte through a
    TLS record layer, and a handshake costs about what 2 MB of record
    processing does.  Attribute-based decryption charges per frame and per
    byte on the client only.  ``client_work_units_per_s`` converts client
    decrypt work into wall-clock latency for the playback model.
    """

    tls_handshake_units: float = 2_000_000.0
    tls_per_byte: float = 1.0
    abe_per_frame: float = 50.0
    abe_per_byte: float = 0.2
    client_work_units_per_s: float = 1e7
    handshake_per_request: bool = True  # False: one handshake per session

    def __post_init__(self):
        for name in ("tls_handshake_units", "tls_per_byte", "abe_per_frame",
                     "abe_per_byte", "client_work_units_per_s"):
            if getattr(self, name) < 0:
                raise ConfigError(f"cost coefficient {name} must be >= 0")


@dataclass(frozen=True)
class Workload:
    n_videos: int = 5
    zipf_s: float = 1.5
    mean_interarrival_s: float = 20.0
    client_count: int = 30
    n_traces: int = 40

    def __post_init__(self):
        if self.zipf_s <= 0:
            raise ConfigError("zipf_s must be > 0")
        if self.mean_interarrival_s <= 0:
            raise ConfigError("mean_interarrival_s must be > 0")


def workload_for(kind: TopologyKind) -> Workload:
    if kind is TopologyKind.SMALL_SCALE:
        return Workload(mean_interarrival_s=20.0, client_count=30)
    return Workload(mean_interarrival_s=10.0, client_count=80)


@dataclass(frozen=True)
class SimConfig:
    topology: TopologyKind = TopologyKind.SMALL_SCALE
    mode: Mode = Mode.HTTPS
    cache_mb: float = 500.0
    segment_duration_s: float = 2.0
    seed: int = 1
    cost: CostModel = field(default_factory=CostModel)
    workload: Optional[Workload] = None  # None: per-topology default
    origin_bw_bps: Optional[float] = None
    buffer_cap_s: float = 20.0
    startup_segments: int = 2
    passes: Optional[int] = None  # None: 1 for a disabled cache, else 2
    collect_request_log: bool = False

    def effective_workload(self) -> Workload:
        return self.workload if self.workload is not None else workload_for(self.topology)

    def effective_passes(self) -> int:
        if self.passes is not None:
            return self.passes
        return 1 if self.cache_mb == 0 else 2

    def validate(self) -> None:
        if self.cache_mb < 0:
            raise ConfigError("cache_mb must be >= 0")
        if self.segment_duration_s <= 0:
            raise ConfigError("segment_duration_s must be > 0")
        if self.startup_segments < 1:
            raise ConfigError("startup_segments must be >= 1")
        if self.startup_segments * self.segment_duration_s > self.buffer_cap_s:
            raise ConfigError("startup threshold exceeds the buffer cap")
        if self.effective_passes() < 1:
            raise ConfigError("passes must be >= 1")

    def with_overrides(self, **kwargs) -> "SimConfig":
        return replace(self, **kwargs)
