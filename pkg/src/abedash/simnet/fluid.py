"""Fluid-flow network: max-min fair rate sharing on a tree of links.

Every transfer occupies exactly one link (client-node to cache, or cache to
parent); multi-hop delivery is a chain of single-link flows where each
downstream flow is rate-capped by its upstream "feeder" until the feeder
completes (cut-through forwarding, which is also what makes read-while-write
joins work).  Rates are recomputed whenever the flow set changes: links are
processed origin-outward so feeder rates are already current, and each link
runs a capacity water-fill over its flows' ceilings.

Flow state lives in flat numpy arrays, and each link caches its member-index
array so a reallocation is a handful of C-speed vector ops.
"""

from __future__ import annotations

import numpy as np

UNCAPPED = 1e11  # bytes/s stand-in for an unconstrained link
_FINISH_TOL = 1e-3  # bytes


class _Link:
    __slots__ = ("cap", "members", "stale", "idx", "capped_idx", "free_idx",
                 "n_capped")

    def __init__(self, cap: float):
        self.cap = cap
        self.members: set[int] = set()
        self.stale = True
        self.idx = np.empty(0, dtype=np.int64)
        self.capped_idx = np.empty(0, dtype=np.int64)
        self.free_idx = np.empty(0, dtype=np.int64)
        self.n_capped = 0  # maintained incrementally; authoritative


class FluidNet:
    def __init__(self, link_caps_bytes_per_s: list[float],
                 link_children: list[list[int]]):
        """``link_caps`` must be in topological order (origin-side first);
        ``link_children[i]`` lists links whose flows can be fed by flows on
        link i (ceiling dirt propagates along these edges)."""
        self.links = [_Link(c) for c in link_caps_bytes_per_s]
        self.link_children = link_children
        n0 = 256
        self.remaining = np.zeros(n0)
        self.rate = np.zeros(n0)
        self.link = np.full(n0, -1, dtype=np.int32)
        self.feeder = np.full(n0, -1, dtype=np.int32)
        self.active = np.zeros(n0, dtype=bool)
        self._free = list(range(n0 - 1, -1, -1))
        self._high = 0
        self._dependents: dict[int, list[int]] = {}
        self.now = 0.0
        self._dirty: set[int] = set()
        self.audit_ok = True
        self.n_active = 0
        self._next_done_abs: float | None = np.inf  # None: needs a rescan

    def _grow(self) -> None:
        old = len(self.active)
        new = old * 2
        for name in ("remaining", "rate"):
            arr = np.zeros(new)
            arr[:old] = getattr(self, name)
            setattr(self, name, arr)
        for name in ("link", "feeder"):
            arr = np.full(new, -1, dtype=np.int32)
            arr[:old] = getattr(self, name)
            setattr(self, name, arr)
        active = np.zeros(new, dtype=bool)
        active[:old] = self.active
        self.active = active
        self._free.extend(range(new - 1, old - 1, -1))

    def add_flow(self, link_id: int, nbytes: float, feeder: int = -1) -> int:
        if not self._free:
            self._grow()
        idx = self._free.pop()
        self._high = max(self._high, idx + 1)
        self.remaining[idx] = float(nbytes)
        self.rate[idx] = 0.0
        self.link[idx] = link_id
        self.feeder[idx] = feeder
        self.active[idx] = True
        self.n_active += 1
        link = self.links[link_id]
        link.members.add(idx)
        link.stale = True
        if feeder >= 0:
            self._dependents.setdefault(feeder, []).append(idx)
            link.n_capped += 1
        self._dirty.add(link_id)
        return idx

    def advance(self, t: float) -> None:
        if self._dirty:
            self.recompute()
        dt = t - self.now
        if dt > 0.0:
            h = self._high
            np.subtract(self.remaining[:h], self.rate[:h] * dt,
                        out=self.remaining[:h], where=self.active[:h])
            self.now = t
        elif dt < -1e-9:
            raise ValueError(f"time went backwards: {self.now} -> {t}")

    def recompute(self) -> None:
        if not self._dirty:
            return
        # one ascending pass: children sit strictly after their parent link;
        # dirt propagates downward only into links that have ceilinged flows
        dirty = self._dirty
        for lk in range(len(self.links)):
            if lk in dirty and self._waterfill(lk):
                for child in self.link_children[lk]:
                    if self.links[child].n_capped > 0:
                        dirty.add(child)
        self._dirty = set()
        self._next_done_abs = None

    def _waterfill(self, link_id: int) -> bool:
        """Reallocate one link; True when any flow's rate changed."""
        link = self.links[link_id]
        n = len(link.members)
        if n == 0:
            return False
        cap = link.cap
        if link.stale:
            link.idx = np.fromiter(link.members, dtype=np.int64, count=n)
            feed = self.feeder[link.idx]
            capped_mask = feed >= 0
            link.capped_idx = link.idx[capped_mask]
            link.free_idx = link.idx[~capped_mask]
            link.n_capped = int(link.capped_idx.size)
            link.stale = False
        if link.n_capped == 0:
            idx = link.idx
            old = self.rate[idx]
            fair = cap / n
            if old[0] == fair and (old == fair).all():
                return False
            self.rate[idx] = fair
            return True
        # water-fill: pin flows whose upstream ceiling sits below the fair
        # share, split the rest of the capacity evenly
        capped_idx = link.capped_idx
        ceilings = self.rate[self.feeder[capped_idx]]
        order = np.argsort(ceilings, kind="stable")
        sc = ceilings[order]
        m = sc.size
        prefix = np.concatenate(([0.0], np.cumsum(sc[:-1])))
        fair = (cap - prefix) / (n - np.arange(m))
        first_free = np.nonzero(sc > fair)[0]
        changed = False
        if first_free.size == 0:
            # every capped flow pinned; the uncapped ones share the remainder
            new_capped = sc
            level = (cap - sc.sum()) / (n - m) if n > m else 0.0
        else:
            j = int(first_free[0])
            level = fair[j]
            new_capped = np.concatenate((sc[:j], np.full(m - j, level)))
        reordered = np.empty(m)
        reordered[order] = new_capped
        old_capped = self.rate[capped_idx]
        if not np.array_equal(reordered, old_capped):
            self.rate[capped_idx] = reordered
            changed = True
        if link.free_idx.size:
            old_free = self.rate[link.free_idx]
            if old_free[0] != level or not (old_free == level).all():
                self.rate[link.free_idx] = level
                changed = True
        if changed:
            total = reordered.sum() + level * link.free_idx.size
            if total > cap * (1.0 + 1e-9) + 1e-6:
                self.audit_ok = False
        return changed

    def next_completion(self) -> float:
        """Absolute time of the earliest flow completion (inf when idle).

        Absolute finish times only move when rates change, so the scan result
        is cached until the next reallocation."""
        if self._dirty:
            self.recompute()
        if self._next_done_abs is not None:
            return self._next_done_abs
        if self.n_active == 0:
            self._next_done_abs = np.inf
            return np.inf
        h = self._high
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(self.active[:h] & (self.rate[:h] > 0.0),
                         self.remaining[:h] / self.rate[:h], np.inf)
        self._next_done_abs = self.now + max(0.0, float(t.min()))
        return self._next_done_abs

    def pop_finished(self) -> list[int]:
        """Flows whose bytes ran out as of ``now``; removes them and lifts the
        ceilings of their dependents."""
        h = self._high
        done = np.nonzero(self.active[:h] & (self.remaining[:h] <= _FINISH_TOL))[0]
        finished = [int(i) for i in done]
        for idx in finished:
            self.active[idx] = False
            self.n_active -= 1
            link = self.links[self.link[idx]]
            link.members.discard(idx)
            link.stale = True
            if self.feeder[idx] >= 0:
                link.n_capped -= 1
            self._dirty.add(int(self.link[idx]))
            for dep in self._dependents.pop(idx, ()):  # feeder done: cap lifts
                if self.active[dep]:
                    self.feeder[dep] = -1
                    dep_link = int(self.link[dep])
                    self.links[dep_link].stale = True
                    self.links[dep_link].n_capped -= 1
                    self._dirty.add(dep_link)
            fed_by = int(self.feeder[idx])
            if fed_by >= 0 and fed_by in self._dependents:
                # drop the back-reference so a reused slot is never touched
                try:
                    self._dependents[fed_by].remove(idx)
                except ValueError:
                    pass
            self.link[idx] = -1
            self.feeder[idx] = -1
            self.rate[idx] = 0.0
            self._free.append(idx)
        return finished
