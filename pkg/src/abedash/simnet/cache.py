"""LRU cache state with read-while-write joins."""

from __future__ import annotations

from collections import OrderedDict
from enum import Enum


class LookupResult(Enum):
    HIT = "hit"
    RWW_HIT = "rww"
    MISS = "miss"


class CacheState:
    """Byte-capacity LRU store plus a registry of in-flight fetches.

    Objects are admitted only when their upstream fetch completes; while in
    flight they are joinable (RWW) but not evictable, because they are not in
    the store yet.  A zero-capacity cache stores nothing and never registers
    fetches, so every request is a plain miss.
    """

    def __init__(self, name: str, capacity_bytes: float):
        self.name = name
        self.capacity = float(capacity_bytes)
        self.store: "OrderedDict[str, int]" = OrderedDict()
        self.stored_bytes = 0
        self.in_flight: dict[str, int] = {}  # url -> fetch flow id
        self.hits = 0
        self.misses = 0
        self.rww_hits = 0
        self.midgress_bytes = 0
        self.served_bytes = 0

    @property
    def requests(self) -> int:
        return self.hits + self.misses + self.rww_hits

    @property
    def hit_rate(self) -> float:
        looked = self.hits + self.misses
        return self.hits / looked if looked else 0.0

    def lookup(self, url: str, now: float) -> LookupResult:
        if url in self.store:
            self.store.move_to_end(url)
            self.hits += 1
            return LookupResult.HIT
        if url in self.in_flight:
            self.rww_hits += 1
            return LookupResult.RWW_HIT
        self.misses += 1
        return LookupResult.MISS

    def register_fetch(self, url: str, flow_id: int, size: int) -> None:
        self.midgress_bytes += size
        if self.capacity > 0:
            self.in_flight[url] = flow_id

    def complete_fetch(self, url: str, size: int) -> None:
        self.in_flight.pop(url, None)
        if size > self.capacity:
            return
        while self.stored_bytes + size > self.capacity:
            evicted, evicted_size = self.store.popitem(last=False)
            self.stored_bytes -= evicted_size
        self.store[url] = size
        self.stored_bytes += size

    def reset_counters(self) -> None:
        """New measurement pass: counters restart, the store stays warm."""
        self.hits = self.misses = self.rww_hits = 0
        self.midgress_bytes = 0
        self.served_bytes = 0


def cache_lookup(cache: CacheState, url: str, now: float) -> LookupResult:
    return cache.lookup(url, now)
