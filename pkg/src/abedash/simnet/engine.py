"""Event-driven delivery simulation.

One run executes a warm-up pass that populates the caches and then a
measured pass that replays the warm-up pass's quality decisions, so both
passes issue the identical request sequence (a disabled cache skips the
warm-up).  Within a pass, clients arrive on a Poisson schedule, pick a video
by Zipf popularity, and stream their head trace's viewport tiles: four
parallel tile transfers per segment, rate-shared max-min fairly on the tree
links, with cut-through forwarding from upstream fetches and read-while-
write joins at the caches.

CPU cost accounting follows the delivery mode.  HTTPS charges TLS record
work per byte at every hop that terminates a connection (origin serve, cache
receive + re-serve, client receive) plus handshakes; the ABE modes charge
the caches and origin nothing at serve time and bill decryption to the
client, per frame and per byte of the frames its tiles actually encrypt.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..selenc import EncryptionLevel, crypto_work
from .cache import CacheState, LookupResult
from .config import ConfigError, Mode, SimConfig, Topology, build_topology
from .dataset import (DatasetSpec, ManifestSizes, SizeModel, dataset_selections,
                      levels_for_mode, segment_urls)
from .fluid import FluidNet
from .metrics import CacheMetrics, ClientMetrics, Metrics
from .playback import (ClientPlayback, abr_select, advance_to,
                       harmonic_mean_throughput, segment_ready)
from .workload import sample_arrivals, sample_video

_TPUT_WINDOW = 5  # per-segment throughput samples feeding the ABR estimate


@dataclass
class _Client:
    cid: int
    start_t: float
    video: int
    trace: int
    node: str
    cache: str
    playback: ClientPlayback = None  # type: ignore[assignment]
    next_segment: int = 0
    fetched: int = 0
    pending: dict[str, int] = field(default_factory=dict)
    seg_bytes: int = 0
    launch_t: float = 0.0
    tput_hist: list[float] = field(default_factory=list)
    qualities: list[int] = field(default_factory=list)
    delivered_bytes: int = 0
    requested_bytes: int = 0
    work_units: float = 0.0


class _Pass:
    """Accumulators and live state of one simulation pass."""

    def __init__(self, run: "_Run", replay: Optional[list[list[int]]],
                 collect_log: bool):
        self.run = run
        self.replay = replay
        self.net = FluidNet(run.link_caps, run.link_children)
        self.heap: list[tuple[float, int, str, int, int]] = []
        self._seq = 0
        self.flow_cb: dict[int, tuple] = {}
        self.node_work: dict[str, float] = {n: 0.0 for n in run.topo.nodes}
        self.sessions: set[tuple[str, str]] = set()
        self.lookup_calls: dict[str, int] = {c: 0 for c in run.topo.cache_nodes}
        self.log: Optional[list] = [] if collect_log else None
        self.t_end = 0.0
        cfg = run.config
        self.clients = []
        for cid in range(run.workload.client_count):
            client = _Client(
                cid=cid, start_t=run.arrivals[cid], video=run.videos[cid],
                trace=run.trace_of[cid], node=run.client_node_of[cid],
                cache=run.topo.parent_of(run.client_node_of[cid]))
            client.playback = ClientPlayback(
                n_segments=run.n_segments,
                segment_duration_s=cfg.segment_duration_s,
                startup_segments=cfg.startup_segments,
                t=client.start_t)
            self.clients.append(client)
        for cache in run.caches.values():
            cache.reset_counters()

    def push(self, t: float, kind: str, a: int, b: int = 0) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (t, self._seq, kind, a, b))

    # -- cost charging --------------------------------------------------

    def _charge_handshake(self, server: str, requester: str) -> None:
        cost = self.run.config.cost
        if cost.handshake_per_request:
            self.node_work[server] += cost.tls_handshake_units
        elif (requester, server) not in self.sessions:
            self.sessions.add((requester, server))
            self.node_work[server] += cost.tls_handshake_units

    # -- request path ---------------------------------------------------

    def _feed_from(self, cache_name: str, url: str, size: int, now: float,
                   requester: str) -> int:
        """Serve ``url`` from a cache on behalf of ``requester``; returns the
        feeder flow for the requester's downstream transfer (-1 if the bytes
        are already fully stored)."""
        run = self.run
        https = run.config.mode is Mode.HTTPS
        cache = run.caches[cache_name]
        self.lookup_calls[cache_name] += 1
        result = cache.lookup(url, now)
        if self.log is not None:
            self.log.append((now, cache_name, url, result.value))
        cache.served_bytes += size
        if https:
            # downstream re-encryption plus the requester's TLS handshake
            self.node_work[cache_name] += run.config.cost.tls_per_byte * size
            self._charge_handshake(cache_name, requester)
        if result is LookupResult.HIT:
            return -1
        if result is LookupResult.RWW_HIT:
            return cache.in_flight[url]
        parent = run.topo.parent_of(cache_name)
        if parent == "origin":
            feeder_up = -1
            if https:
                self.node_work["origin"] += run.config.cost.tls_per_byte * size
                self._charge_handshake("origin", f"cache:{cache_name}")
        else:
            feeder_up = self._feed_from(parent, url, size, now,
                                        f"cache:{cache_name}")
        flow = self.net.add_flow(run.link_index[cache_name], size, feeder_up)
        self.flow_cb[flow] = ("fetch", cache_name, url, size)
        cache.register_fetch(url, flow, size)
        if https:  # upstream decryption of the fetched bytes
            self.node_work[cache_name] += run.config.cost.tls_per_byte * size
        return flow

    def _launch(self, client: _Client, now: float) -> None:
        run = self.run
        cfg = run.config
        k = client.next_segment
        client.next_segment += 1
        if self.replay is not None:
            q = self.replay[client.cid][k]
        else:
            tput = harmonic_mean_throughput(client.tput_hist[-_TPUT_WINDOW:])
            q = abr_select(tput, cfg.segment_duration_s, run.abr_bytes_by_q,
                           run.abr_decrypt_s_by_q)
        client.qualities.append(q)
        selection = run.selections[client.trace][k]
        quality = run.spec.qualities[q]
        client.pending = {}
        client.seg_bytes = 0
        client.launch_t = now
        for url, _tile, level in segment_urls(run.spec.video_id(client.video),
                                              selection, quality.index, cfg.mode):
            info = run.object_info(url, quality.index, level)
            feeder = self._feed_from(client.cache, url, info.nbytes, now,
                                     f"client:{client.cid}")
            flow = self.net.add_flow(run.link_index[client.node], info.nbytes, feeder)
            self.flow_cb[flow] = ("tile", client.cid, url, info.nbytes)
            client.pending[url] = info.nbytes
            client.seg_bytes += info.nbytes
            client.requested_bytes += info.nbytes
            if cfg.mode is Mode.HTTPS:
                client.work_units += cfg.cost.tls_per_byte * info.nbytes

    def _segment_fetched(self, client: _Client, now: float) -> None:
        run = self.run
        cfg = run.config
        total = client.seg_bytes
        elapsed = now - client.launch_t
        tput = total * 8.0 / elapsed if elapsed > 1e-9 else 8.0 * total * 1e9
        client.tput_hist.append(tput)
        q = client.qualities[-1]
        decrypt_s = run.abr_decrypt_s_by_q[q]
        if cfg.mode.is_abe:
            client.work_units += run.abr_decrypt_work_by_q[q]
        client.fetched += 1
        if decrypt_s > 0.0:
            self.push(now + decrypt_s, "playable", client.cid, client.fetched - 1)
        else:
            segment_ready(client.playback, now)
        self._schedule_next_launch(client, now)

    def _schedule_next_launch(self, client: _Client, now: float) -> None:
        cfg = self.run.config
        if client.next_segment >= self.run.n_segments:
            return
        advance_to(client.playback, now)
        buffered = client.fetched * cfg.segment_duration_s - client.playback.playhead_s
        threshold = cfg.buffer_cap_s - cfg.segment_duration_s
        if buffered <= threshold + 1e-9:
            self._launch(client, now)
        else:
            self.push(now + (buffered - threshold), "launch", client.cid)

    # -- event loop -------------------------------------------------------

    def execute(self) -> None:
        for client in self.clients:
            self.push(client.start_t, "start", client.cid)
        net = self.net
        inf = float("inf")
        while True:
            t_flow = net.next_completion()
            t_heap = self.heap[0][0] if self.heap else inf
            if t_flow == inf and t_heap == inf:
                break
            if t_flow <= t_heap:
                net.advance(t_flow)
                finished = net.pop_finished()
                if not finished:
                    # numerical corner: nudge forward to the next boundary
                    net.advance(t_flow + 1e-9)
                    finished = net.pop_finished()
                self.t_end = max(self.t_end, net.now)
                self._handle_finished(finished, net.now)
            else:
                net.advance(t_heap)
                t, _seq, kind, a, b = heapq.heappop(self.heap)
                self.t_end = max(self.t_end, t)
                self._handle_event(t, kind, a, b)

    def _handle_finished(self, finished: list[int], now: float) -> None:
        fetches = []
        tiles = []
        for idx in finished:
            cb = self.flow_cb.pop(idx)
            (fetches if cb[0] == "fetch" else tiles).append(cb)
        for _kind, cache_name, url, size in fetches:
            self.run.caches[cache_name].complete_fetch(url, size)
        for _kind, cid, url, size in tiles:
            client = self.clients[cid]
            client.pending.pop(url, None)
            client.delivered_bytes += size
            if not client.pending:
                self._segment_fetched(client, now)

    def _handle_event(self, t: float, kind: str, a: int, b: int) -> None:
        client = self.clients[a]
        if kind == "start":
            self._launch(client, t)
        elif kind == "launch":
            self._schedule_next_launch(client, t)
        elif kind == "playable":
            segment_ready(client.playback, t)
        else:
            raise RuntimeError(f"unknown event kind {kind!r}")


class _Run:
    def __init__(self, config: SimConfig, dataset: Optional[DatasetSpec],
                 sizes: Optional[ManifestSizes]):
        config.validate()
        self.config = config
        self.spec = dataset if dataset is not None else DatasetSpec()
        self.manifest = sizes
        self.topo: Topology = build_topology(config.topology, config.origin_bw_bps)
        self.workload = config.effective_workload()
        if self.workload.n_videos != self.spec.n_videos:
            raise ConfigError(
                f"workload expects {self.workload.n_videos} videos but the "
                f"dataset provides {self.spec.n_videos}")
        if self.workload.n_traces != self.spec.n_traces:
            raise ConfigError(
                f"workload expects {self.workload.n_traces} traces but the "
                f"dataset provides {self.spec.n_traces}")

        self.link_index = {link.child: i for i, link in enumerate(self.topo.links)}
        self.link_caps = [link.bandwidth_bps / 8.0 for link in self.topo.links]
        self.link_children = []
        for link in self.topo.links:
            self.link_children.append(
                [j for j, other in enumerate(self.topo.links)
                 if other.parent == link.child])

        capacity = config.cache_mb * 1_000_000.0
        self.caches = {name: CacheState(name, capacity)
                       for name in self.topo.cache_nodes}

        self.size_model = SizeModel(self.spec, config.segment_duration_s)
        self.selections = dataset_selections(self.spec, config.segment_duration_s)
        self.n_segments = self.spec.n_segments(config.segment_duration_s)

        rng = np.random.default_rng(np.random.PCG64(config.seed))
        self.arrivals = sample_arrivals(rng, self.workload.client_count,
                                        self.workload.mean_interarrival_s)
        self.videos = [sample_video(rng, self.workload.n_videos, self.workload.zipf_s)
                       for _ in range(self.workload.client_count)]
        # head-trace MPDs: trace t plays video (t mod n_videos); clients take
        # the next trace of their video's group, wrapping when exhausted
        groups: dict[int, list[int]] = {}
        for t in range(self.spec.n_traces):
            groups.setdefault(t % self.spec.n_videos, []).append(t)
        counters = {v: 0 for v in groups}
        self.trace_of = []
        for video in self.videos:
            group = groups[video % len(groups)]
            self.trace_of.append(group[counters[video] % len(group)])
            counters[video] += 1
        per_node = self.topo.clients_per_node
        self.client_node_of = [self.topo.client_nodes[cid // per_node]
                               for cid in range(self.workload.client_count)]
        if self.workload.client_count > per_node * len(self.topo.client_nodes):
            raise ConfigError("client_count exceeds topology capacity")

        # per-quality ABR candidates: a viewport is one major + three minor
        # tiles, so sizes and decrypt costs depend only on (quality, mode)
        self.abr_bytes_by_q = []
        self.abr_decrypt_work_by_q = []
        self.abr_decrypt_s_by_q = []
        roles_levels = self._mode_levels()
        for q in self.spec.qualities:
            total = 0
            work = 0.0
            for level in roles_levels:
                info = self.size_model.object_info(q.index, level)
                total += info.nbytes
                if config.mode.is_abe:
                    work += crypto_work("decrypt", level,
                                        self.size_model.seg_stats(q.index),
                                        config.cost)
            self.abr_bytes_by_q.append(total)
            self.abr_decrypt_work_by_q.append(work)
            self.abr_decrypt_s_by_q.append(work / config.cost.client_work_units_per_s)

    def _mode_levels(self) -> list[EncryptionLevel]:
        mode = self.config.mode
        if mode is Mode.HTTPS:
            return [EncryptionLevel.NONE] * 4
        if mode is Mode.ABE_ALL_IP:
            return [EncryptionLevel.ALL_IP] * 4
        return [EncryptionLevel.ALL_IP] + [EncryptionLevel.ALL_I] * 3

    def object_info(self, url: str, quality_index: int, level: EncryptionLevel):
        if self.manifest is not None:
            return self.manifest.lookup(url)
        return self.size_model.object_info(quality_index, level)

    def execute(self) -> Metrics:
        passes = self.config.effective_passes()
        replay = None
        final: Optional[_Pass] = None
        for p in range(passes):
            collect = (p == passes - 1) and self.config.collect_request_log
            run_pass = _Pass(self, replay, collect)
            run_pass.execute()
            if replay is None:
                replay = [c.qualities for c in run_pass.clients]
            final = run_pass
        assert final is not None
        return self._metrics(final, passes)

    def _metrics(self, p: _Pass, passes: int) -> Metrics:
        caches = {}
        accounting_ok = True
        for name, cache in self.caches.items():
            caches[name] = CacheMetrics(
                name=name, hits=cache.hits, misses=cache.misses,
                rww_hits=cache.rww_hits, midgress_bytes=cache.midgress_bytes,
                served_bytes=cache.served_bytes, stored_bytes=cache.stored_bytes)
            if cache.requests != p.lookup_calls[name]:
                accounting_ok = False
            if cache.in_flight:
                accounting_ok = False
        clients = []
        conservation_ok = accounting_ok
        for c in p.clients:
            pb = c.playback
            if c.delivered_bytes != c.requested_bytes or c.pending:
                conservation_ok = False
            if pb.ready != self.n_segments:
                conservation_ok = False
            quality_indices = [self.spec.qualities[q].index for q in c.qualities]
            bitrates = [4.0 * self.spec.qualities[q].tile_bitrate_bps
                        for q in c.qualities]
            clients.append(ClientMetrics(
                client_id=c.cid, video=c.video, trace=c.trace,
                startup_delay_s=(pb.play_start or c.start_t) - c.start_t,
                stall_s=pb.stall_s,
                rebuffer_ratio=pb.rebuffer_ratio,
                mean_quality_index=sum(quality_indices) / len(quality_indices),
                mean_bitrate_bps=sum(bitrates) / len(bitrates),
                delivered_bytes=c.delivered_bytes,
                requested_bytes=c.requested_bytes,
                work_units=c.work_units))
        node_work = dict(p.node_work)
        node_work["clients_total"] = sum(c.work_units for c in p.clients)
        return Metrics(
            config=self.config, passes=passes, sim_duration_s=p.t_end,
            node_work=node_work, caches=caches, clients=clients,
            capacity_audit_ok=p.net.audit_ok, conservation_ok=conservation_ok,
            request_log=p.log)


def run(config: SimConfig, dataset: Optional[DatasetSpec] = None,
        sizes: Optional[ManifestSizes] = None) -> Metrics:
    """Execute one simulation (warm-up pass plus measured pass) and return the
    measured-pass metrics."""
    return _Run(config, dataset, sizes).execute()
