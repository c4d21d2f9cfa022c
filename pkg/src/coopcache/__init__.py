"""Cooperative edge caching with predicted mobility and demand.

Modules
-------
topology   network, catalog and capacities
delay      six-tier retrieval order and per-request delays
objective  relaxed expected cost, gradients, capacity constraints
solver     adaptive-penalty gradient method and rounding
mobility   PPM residence-time prediction
demand     self-attentive recommender with hierarchical federated averaging
baselines  LRU, random, noncooperative and oracle placements
sim        scenarios, episode pipeline, sweeps
config     INI scenario configuration
cli        command-line entry point
"""
from .delay import Placement, SourceTier
from .objective import ProblemInstance, RelaxedPlacement
from .solver import SolverConfig, solve
from .topology import Capacities, Catalog, Topology

__version__ = "0.1.0"

__all__ = [
    "Topology",
    "Catalog",
    "Capacities",
    "Placement",
    "SourceTier",
    "ProblemInstance",
    "RelaxedPlacement",
    "SolverConfig",
    "solve",
]
