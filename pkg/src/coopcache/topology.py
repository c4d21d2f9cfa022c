"""Static network model: clusters of one MBS plus member RSUs, link rates,
storage capacities and the content catalog.

Units are fixed throughout the package: sizes in megabits, rates in
megabits per second, delays in seconds.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

__all__ = ["Topology", "Catalog", "Capacities", "TopologyError", "build_topology"]


class TopologyError(ValueError):
    """Raised for an invalid network description."""


@dataclass(frozen=True)
class Topology:
    """Clusters and link rates.

    ``cluster_of[r]`` is the 0-based MBS index of RSU ``r``. Rates are in
    Mb/s: cloud-MBS backhaul, MBS-RSU fronthaul and MBS-MBS links.
    """

    mbs_count: int
    cluster_of: np.ndarray
    rate_cloud_mbs: float
    rate_mbs_rsu: float
    rate_mbs_mbs: float
    members: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        cluster_of = np.asarray(self.cluster_of, dtype=np.int64)
        cluster_of.setflags(write=False)
        object.__setattr__(self, "cluster_of", cluster_of)
        if self.mbs_count < 1:
            raise TopologyError(f"mbs_count must be positive, got {self.mbs_count}")
        if cluster_of.ndim != 1:
            raise TopologyError("cluster_of must be one-dimensional")
        if cluster_of.size and (cluster_of.min() < 0 or cluster_of.max() >= self.mbs_count):
            bad = int(cluster_of[(cluster_of < 0) | (cluster_of >= self.mbs_count)][0])
            raise TopologyError(f"RSU assigned to nonexistent MBS {bad}")
        for name in ("rate_cloud_mbs", "rate_mbs_rsu", "rate_mbs_mbs"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise TopologyError(f"nonpositive rate: {name}={value}")
        if min(self.rate_mbs_rsu, self.rate_mbs_mbs) <= self.rate_cloud_mbs:
            warnings.warn(
                "edge link rates are not larger than the cloud backhaul rate; "
                "cooperative caching brings little benefit",
                stacklevel=3,
            )
        members = tuple(
            np.flatnonzero(cluster_of == m) for m in range(self.mbs_count)
        )
        for idx in members:
            idx.setflags(write=False)
        object.__setattr__(self, "members", members)

    @property
    def rsu_count(self) -> int:
        return int(self.cluster_of.size)

    def cluster_sizes(self) -> np.ndarray:
        return np.array([len(idx) for idx in self.members], dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return (
            self.mbs_count == other.mbs_count
            and np.array_equal(self.cluster_of, other.cluster_of)
            and self.rate_cloud_mbs == other.rate_cloud_mbs
            and self.rate_mbs_rsu == other.rate_mbs_rsu
            and self.rate_mbs_mbs == other.rate_mbs_mbs
        )

    __hash__ = None


@dataclass(frozen=True)
class Catalog:
    """File sizes in megabits, one entry per file (0-based file index)."""

    sizes: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.float64).copy()
        if sizes.ndim != 1 or sizes.size == 0:
            raise TopologyError("catalog needs at least one file")
        if not np.all(np.isfinite(sizes)) or np.any(sizes <= 0):
            raise TopologyError("nonpositive size in catalog")
        sizes.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)

    @property
    def file_count(self) -> int:
        return int(self.sizes.size)

    @classmethod
    def uniform(cls, file_count: int, size: float = 1.0) -> "Catalog":
        return cls(np.full(file_count, float(size)))

    def __eq__(self, other):
        if not isinstance(other, Catalog):
            return NotImplemented
        return np.array_equal(self.sizes, other.sizes)

    __hash__ = None


@dataclass(frozen=True)
class Capacities:
    """Storage space per RSU and per MBS, in megabits."""

    rsu: np.ndarray
    mbs: np.ndarray

    def __post_init__(self):
        for name in ("rsu", "mbs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).copy()
            if arr.ndim != 1:
                raise TopologyError(f"{name} capacities must be one-dimensional")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise TopologyError(f"negative {name} capacity")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def uniform(cls, rsu_count: int, mbs_count: int, rsu_cap: float, mbs_cap: float):
        return cls(np.full(rsu_count, float(rsu_cap)), np.full(mbs_count, float(mbs_cap)))

    def cacheless(self, catalog: Catalog) -> tuple[np.ndarray, np.ndarray]:
        """Boolean masks of RSUs and MBSs too small to hold any file."""
        smallest = catalog.sizes.min()
        return self.rsu < smallest, self.mbs < smallest

    def __eq__(self, other):
        if not isinstance(other, Capacities):
            return NotImplemented
        return np.array_equal(self.rsu, other.rsu) and np.array_equal(self.mbs, other.mbs)

    __hash__ = None


def _parse_cluster_map(text: str, mbs_count: int) -> np.ndarray:
    # "rsu:mbs, rsu:mbs, ..." with 1-based ids, RSU ids must be 1..R
    pairs = {}
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        try:
            rsu, mbs = (int(p) for p in chunk.split(":"))
        except ValueError:
            raise TopologyError(f"bad cluster_of entry {chunk!r}, expected rsu:mbs") from None
        if rsu in pairs:
            raise TopologyError(f"duplicate RSU id {rsu}")
        if not 1 <= mbs <= mbs_count:
            raise TopologyError(f"RSU {rsu} assigned to nonexistent MBS {mbs}")
        pairs[rsu] = mbs
    if sorted(pairs) != list(range(1, len(pairs) + 1)):
        raise TopologyError("RSU ids must be contiguous starting at 1")
    return np.array([pairs[r] - 1 for r in sorted(pairs)], dtype=np.int64)


def build_topology(config) -> tuple[Topology, Catalog, Capacities]:
    """Build validated network structures from a parsed scenario config.

    ``config`` needs ``topology``, ``catalog`` and ``capacities`` sections
    (see :mod:`coopcache.config`). The result is a pure function of the
    config.
    """
    t = config.topology
    if t.cluster_of:
        cluster_of = _parse_cluster_map(t.cluster_of, t.mbs_count)
    else:
        cluster_of = np.repeat(np.arange(t.mbs_count), t.rsus_per_mbs)
    topo = Topology(t.mbs_count, cluster_of, t.rate_cloud_mbs, t.rate_mbs_rsu, t.rate_mbs_mbs)

    c = config.catalog
    if c.sizes:
        sizes = [float(s) for s in c.sizes.split(",") if s.strip()]
        if len(sizes) != c.file_count:
            raise TopologyError(f"catalog lists {len(sizes)} sizes for {c.file_count} files")
        catalog = Catalog(np.array(sizes))
    else:
        if c.file_size <= 0:
            raise TopologyError(f"nonpositive size: file_size={c.file_size}")
        catalog = Catalog.uniform(c.file_count, c.file_size)

    k = config.capacities
    caps = Capacities.uniform(topo.rsu_count, topo.mbs_count, k.rsu_cap, k.mbs_cap)
    rsu_none, mbs_none = caps.cacheless(catalog)
    if rsu_none.any() or mbs_none.any():
        log.info("%d RSUs and %d MBSs cannot hold any file", rsu_none.sum(), mbs_none.sum())
    return topo, catalog, caps
