"""Per-(RSU, file) retrieval delays under the six-tier HCCN retrieval order.

A request arriving at RSU ``r`` for file ``f`` is served by the first of:
the RSU itself, its MBS, another RSU of the cluster, another MBS, an RSU
outside the cluster, and finally the cloud. Each tier's delay is the file
size divided by the rates of the links it crosses.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .topology import Catalog, Topology

__all__ = [
    "Placement",
    "SourceTier",
    "tier_unit_delays",
    "case_delays",
    "case_delays_all",
    "retrieval_delay",
    "resolve_source",
    "delay_matrix",
]


class SourceTier(IntEnum):
    LocalRSU = 0
    LocalMBS = 1
    ClusterRSU = 2
    OtherMBS = 3
    OtherRSU = 4
    Cloud = 5


@dataclass(frozen=True)
class Placement:
    """Binary caching decisions: ``x`` is R x F (RSUs), ``y`` is M x F (MBSs)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for name in ("x", "y"):
            arr = np.asarray(getattr(self, name))
            if arr.ndim != 2:
                raise ValueError(f"placement {name} must be two-dimensional")
            if arr.size and not np.all((arr == 0) | (arr == 1)):
                raise ValueError(f"placement {name} must be binary")
            arr = arr.astype(np.int8)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.x.shape[1] != self.y.shape[1]:
            raise ValueError("x and y disagree on the number of files")

    @classmethod
    def empty(cls, rsu_count: int, mbs_count: int, file_count: int) -> "Placement":
        return cls(np.zeros((rsu_count, file_count)), np.zeros((mbs_count, file_count)))

    def used(self, catalog: Catalog) -> tuple[np.ndarray, np.ndarray]:
        """Storage used per RSU and per MBS."""
        return self.x @ catalog.sizes, self.y @ catalog.sizes

    def is_feasible(self, catalog: Catalog, capacities) -> bool:
        rsu_used, mbs_used = self.used(catalog)
        return bool(np.all(rsu_used <= capacities.rsu) and np.all(mbs_used <= capacities.mbs))

    def __eq__(self, other):
        if not isinstance(other, Placement):
            return NotImplemented
        return np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)

    __hash__ = None


def tier_unit_delays(topo: Topology) -> np.ndarray:
    """Delay per megabit of each tier, in s/Mb (index = SourceTier)."""
    mr = 1.0 / topo.rate_mbs_rsu
    mm = 1.0 / topo.rate_mbs_mbs
    cm = 1.0 / topo.rate_cloud_mbs
    return np.array([0.0, mr, 2 * mr, mm + mr, mm + 2 * mr, cm + mr])


def _check_ids(topo, catalog, r, f):
    if not 0 <= r < topo.rsu_count:
        raise IndexError(f"RSU index {r} out of range [0, {topo.rsu_count})")
    if not 0 <= f < catalog.file_count:
        raise IndexError(f"file index {f} out of range [0, {catalog.file_count})")


def _prod(values) -> float:
    out = 1.0
    for v in values:
        out *= v
    return out


def case_delays(placement: Placement, r: int, f: int, topo: Topology, catalog: Catalog) -> np.ndarray:
    """The six case delays of file ``f`` requested at RSU ``r``.

    Evaluates the tier polynomials term by term. Under a binary placement
    at most one component is nonzero.
    """
    _check_ids(topo, catalog, r, f)
    return _case_delays(placement.x, placement.y, r, f, topo, catalog)


def _case_delays(x, y, r, f, topo, catalog):
    m = topo.cluster_of[r]
    cluster = topo.members[m]
    unit = tier_unit_delays(topo) * catalog.sizes[f]
    miss_local = 1.0 - x[r, f]
    miss_mbs = 1.0 - y[m, f]
    none_cluster_others = _prod(1.0 - x[q, f] for q in cluster if q != r)
    none_cluster = _prod(1.0 - x[q, f] for q in cluster)
    none_other_mbs = _prod(1.0 - y[n, f] for n in range(topo.mbs_count) if n != m)
    none_mbs = _prod(1.0 - y[n, f] for n in range(topo.mbs_count))
    outside = np.flatnonzero(topo.cluster_of != m)
    none_outside = _prod(1.0 - x[q, f] for q in outside)
    none_rsu = none_cluster * none_outside

    g = np.zeros(6)
    g[1] = unit[1] * miss_local * y[m, f]
    g[2] = unit[2] * miss_local * miss_mbs * (1.0 - none_cluster_others)
    g[3] = unit[3] * miss_mbs * none_cluster * (1.0 - none_other_mbs)
    g[4] = unit[4] * none_cluster * none_mbs * (1.0 - none_outside)
    g[5] = unit[5] * none_rsu * none_mbs
    return g


def case_delays_all(x, y, topo: Topology, catalog: Catalog) -> np.ndarray:
    """Case delays for every (r, f), shape (6, R, F).

    Accepts real-valued ``x`` and ``y`` in [0, 1] as well as binary ones, so
    it doubles as a direct evaluator of the relaxed tier polynomials.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    R, F = x.shape
    out = np.zeros((6, R, F))
    for r in range(R):
        for f in range(F):
            out[:, r, f] = _case_delays(x, y, r, f, topo, catalog)
    return out


def retrieval_delay(placement: Placement, r: int, f: int, topo: Topology, catalog: Catalog) -> float:
    """Total retrieval delay in seconds (sum of the case delays)."""
    return float(case_delays(placement, r, f, topo, catalog).sum())


def resolve_source(placement: Placement, r: int, f: int, topo: Topology) -> SourceTier:
    """First tier, in retrieval order, that holds file ``f`` for RSU ``r``."""
    x, y = placement.x, placement.y
    m = topo.cluster_of[r]
    if x[r, f]:
        return SourceTier.LocalRSU
    if y[m, f]:
        return SourceTier.LocalMBS
    cluster = topo.members[m]
    if x[cluster, f].any():
        return SourceTier.ClusterRSU
    if y[:, f].any():
        return SourceTier.OtherMBS
    if x[:, f].any():
        return SourceTier.OtherRSU
    return SourceTier.Cloud


def delay_matrix(placement: Placement, topo: Topology, catalog: Catalog) -> tuple[np.ndarray, np.ndarray]:
    """Resolved tier and delay for every (r, f) under a binary placement.

    Vectorised equivalent of :func:`resolve_source` / :func:`retrieval_delay`;
    returns ``(tiers, delays)``, both R x F.
    """
    x = placement.x.astype(bool)
    y = placement.y.astype(bool)
    R, F = x.shape
    cl = topo.cluster_of
    cluster_has = np.zeros((topo.mbs_count, F), dtype=bool)
    for m, idx in enumerate(topo.members):
        if idx.size:
            cluster_has[m] = x[idx].any(axis=0)
    any_mbs = y.any(axis=0)
    any_rsu = x.any(axis=0)

    tiers = np.full((R, F), int(SourceTier.Cloud), dtype=np.int8)
    # fill from the last tier to the first so earlier tiers win
    tiers[np.broadcast_to(any_rsu, (R, F))] = SourceTier.OtherRSU
    tiers[np.broadcast_to(any_mbs, (R, F))] = SourceTier.OtherMBS
    tiers[cluster_has[cl]] = SourceTier.ClusterRSU
    tiers[y[cl]] = SourceTier.LocalMBS
    tiers[x] = SourceTier.LocalRSU
    delays = tier_unit_delays(topo)[tiers] * catalog.sizes[None, :]
    return tiers, delays
