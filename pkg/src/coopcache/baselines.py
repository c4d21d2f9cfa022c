"""Comparison policies: online LRU eviction, random placement, independent
per-node placement and the cooperative solver on exact future knowledge."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .delay import Placement
from .objective import ProblemInstance
from .solver import SolverConfig, exhaustive_optimum, fill_by_score, solve

__all__ = [
    "LruCache",
    "lru_access",
    "random_placement",
    "greedy_local_placement",
    "oracle_cooperative_placement",
    "ENUMERATION_LIMIT",
]

# instances with at most this many binary variables are solved exactly
ENUMERATION_LIMIT = 14


class LruCache:
    """Least-recently-used cache measured in megabits."""

    def __init__(self, capacity: float):
        if capacity < 0:
            raise ValueError("capacity must be nonnegative")
        self.capacity = float(capacity)
        self._entries = OrderedDict()   # file -> size, least recent first
        self.used = 0.0

    def __contains__(self, f) -> bool:
        return f in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def files(self) -> list:
        """Resident files, least recently used first."""
        return list(self._entries)

    def access(self, f, size: float):
        """Returns ``(hit, evicted)``; a miss inserts ``f``."""
        if f in self._entries:
            self._entries.move_to_end(f)
            return True, []
        if size > self.capacity:
            raise ValueError(f"file of size {size} exceeds cache capacity {self.capacity}")
        evicted = []
        while self.used + size > self.capacity:
            old, old_size = self._entries.popitem(last=False)
            self.used -= old_size
            evicted.append(old)
        self._entries[f] = float(size)
        self.used += size
        return False, evicted


def lru_access(cache: LruCache, f, size: float):
    """Functional alias of :meth:`LruCache.access`."""
    return cache.access(f, size)


def random_placement(catalog, capacities, seed) -> Placement:
    """Each node scans a random permutation of the files and keeps every
    file that still fits."""
    rng = np.random.default_rng(seed)
    F, s = catalog.file_count, catalog.sizes

    def row(cap):
        scores = np.empty(F)
        scores[rng.permutation(F)] = np.arange(F, 0, -1)
        return fill_by_score(scores, s, cap)

    x = np.array([row(c) for c in capacities.rsu]).reshape(capacities.rsu.size, F)
    y = np.array([row(c) for c in capacities.mbs]).reshape(capacities.mbs.size, F)
    return Placement(x, y)


def greedy_local_placement(inst: ProblemInstance) -> Placement:
    """Noncooperative placement.

    RSU ``r`` ranks files by ``sum_v demand[v, f] * residence[v, r]``; each
    MBS ranks by the sum of its RSUs' scores. Every node fills its own
    storage, ignoring what neighbours hold.
    """
    s, caps = inst.catalog.sizes, inst.capacities
    R, M, F = inst.shape
    x = np.array([fill_by_score(inst.rho[r], s, caps.rsu[r]) for r in range(R)]).reshape(R, F)
    y = np.zeros((M, F), dtype=np.int8)
    for m, idx in enumerate(inst.topology.members):
        y[m] = fill_by_score(inst.rho[idx].sum(axis=0), s, caps.mbs[m])
    return Placement(x, y)


def oracle_cooperative_placement(inst: ProblemInstance, cfg: SolverConfig = SolverConfig()) -> Placement:
    """Cooperative placement for an instance built from exact future
    residence and requests; exhaustive search on tiny instances."""
    R, M, F = inst.shape
    if (R + M) * F <= ENUMERATION_LIMIT:
        return exhaustive_optimum(inst, ENUMERATION_LIMIT)[0]
    return solve(inst, cfg).placement
