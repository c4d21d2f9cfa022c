"""Relaxed expected caching cost, its gradient, and the capacity constraints.

Decisions are relaxed through a sigmoid, ``x = h(xt)``, ``y = h(yt)`` with
unconstrained ``xt`` (R x F) and ``yt`` (M x F). The expected cost is

    W = sum_{r,f} rho[r, f] * delay_{r,f}(x, y),   rho = residence.T @ demand

where ``delay_{r,f}`` is the tier polynomial of :mod:`coopcache.delay`.
Summing the tier polynomials collapses them to, for ``r`` in cluster ``m``
and writing ``u = 1 - x``, ``v = 1 - y``,

    delay = s/g_mr * u_r * (1 + v_m) + (s/g_mm - s/g_mr) * v_m * A_m
            + s/g_mr * A_m * Y + (s/g_cm - s/g_mm - s/g_mr) * X * Y

with ``A_m`` the product of ``u`` over the cluster, ``X`` the product of
``u`` over all RSUs and ``Y`` the product of ``v`` over all MBSs. One
evaluation is therefore O(F (R + M)) once ``rho`` is known.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .delay import Placement, delay_matrix
from .topology import Capacities, Catalog, Topology

__all__ = [
    "ProblemInstance",
    "RelaxedPlacement",
    "Constraints",
    "LipschitzEstimate",
    "OpCounter",
    "expected_cost",
    "cost_gradient",
    "cost_and_gradient",
    "constraints",
    "binary_cost",
    "lipschitz_estimate",
    "sigmoid",
]

sigmoid = expit


class OpCounter:
    """Tally of elementwise arithmetic operations, by array element."""

    def __init__(self):
        self.ops = 0

    def add(self, *arrays):
        for a in arrays:
            self.ops += int(np.size(a))

    def reset(self):
        self.ops = 0


def _tally(counter, *arrays):
    if counter is not None:
        counter.add(*arrays)


@dataclass(frozen=True)
class RelaxedPlacement:
    """Pre-sigmoid decision variables ``xt`` (R x F) and ``yt`` (M x F)."""

    xt: np.ndarray
    yt: np.ndarray

    def __post_init__(self):
        xt = np.asarray(self.xt, dtype=np.float64)
        yt = np.asarray(self.yt, dtype=np.float64)
        if xt.ndim != 2 or yt.ndim != 2 or xt.shape[1] != yt.shape[1]:
            raise ValueError(f"incompatible shapes {xt.shape} and {yt.shape}")
        if not (np.all(np.isfinite(xt)) and np.all(np.isfinite(yt))):
            raise ValueError("relaxed placement has non-finite entries")
        object.__setattr__(self, "xt", xt)
        object.__setattr__(self, "yt", yt)

    @classmethod
    def full(cls, rsu_count, mbs_count, file_count, value=0.0):
        return cls(np.full((rsu_count, file_count), value), np.full((mbs_count, file_count), value))

    @property
    def x(self):
        return sigmoid(self.xt)

    @property
    def y(self):
        return sigmoid(self.yt)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.xt.ravel(), self.yt.ravel()])

    def with_flat(self, z) -> "RelaxedPlacement":
        n = self.xt.size
        return RelaxedPlacement(z[:n].reshape(self.xt.shape), z[n:].reshape(self.yt.shape))


@dataclass(frozen=True)
class ProblemInstance:
    """Network plus predicted residence (V x R, slots) and demand (V x F)."""

    topology: Topology
    catalog: Catalog
    capacities: Capacities
    residence: np.ndarray
    demand: np.ndarray
    rho: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tau = np.asarray(self.residence, dtype=np.float64)
        pi = np.asarray(self.demand, dtype=np.float64)
        R, F, M = self.topology.rsu_count, self.catalog.file_count, self.topology.mbs_count
        if tau.ndim != 2 or tau.shape[1] != R:
            raise ValueError(f"residence must be V x {R}, got {tau.shape}")
        if pi.ndim != 2 or pi.shape[1] != F:
            raise ValueError(f"demand must be V x {F}, got {pi.shape}")
        if tau.shape[0] != pi.shape[0]:
            raise ValueError(f"residence has {tau.shape[0]} vehicles, demand {pi.shape[0]}")
        if self.capacities.rsu.size != R or self.capacities.mbs.size != M:
            raise ValueError("capacities do not match the topology")
        if np.any(tau < 0):
            raise ValueError("negative residence time")
        if np.any(pi < 0) or np.any(pi > 1):
            raise ValueError("demand entries must lie in [0, 1]")
        object.__setattr__(self, "residence", tau)
        object.__setattr__(self, "demand", pi)
        # rho[r, f] = sum_v demand[v, f] * residence[v, r]
        object.__setattr__(self, "rho", tau.T @ pi)

    @property
    def shape(self):
        return self.topology.rsu_count, self.topology.mbs_count, self.catalog.file_count

    @classmethod
    def from_weights(cls, topology, catalog, capacities, rho) -> "ProblemInstance":
        """Instance whose per-(RSU, file) weights equal ``rho`` directly.

        Uses one pseudo-vehicle per RSU, which keeps ``residence.T @ demand``
        equal to ``rho`` as long as ``rho`` is nonnegative; the demand rows
        are normalised into [0, 1] and the scale is carried by residence.
        """
        rho = np.asarray(rho, dtype=np.float64)
        R = topology.rsu_count
        scale = rho.max(axis=1, keepdims=True) if R else np.zeros((0, 1))
        scale = np.where(scale > 0, scale, 1.0)
        return cls(topology, catalog, capacities, np.diag(scale[:, 0]), rho / scale)


@dataclass(frozen=True)
class Constraints:
    """Capacity constraint values and their gradients w.r.t. ``xt``/``yt``.

    ``P[r] = sum_f x[r, f] s_f - S_r`` with gradient rows ``p[r]``; ``Q`` and
    ``q`` are the MBS analogues. ``p[r]`` is nonzero only in row ``r`` of the
    full variable, so it is stored as one row per constraint.
    """

    P: np.ndarray
    p: np.ndarray
    Q: np.ndarray
    q: np.ndarray

    @property
    def max_violation(self) -> float:
        vals = np.concatenate([self.P, self.Q, [0.0]])
        return float(max(vals.max(), 0.0))


def _prod_except(a: np.ndarray) -> np.ndarray:
    """Product over axis 0 excluding each row in turn, without division."""
    n = a.shape[0]
    ones = np.ones((1,) + a.shape[1:])
    prefix = np.concatenate([ones, np.cumprod(a[:-1], axis=0)]) if n else a
    suffix = np.concatenate([np.cumprod(a[:0:-1], axis=0)[::-1], ones]) if n else a
    return prefix * suffix


def _coefficients(inst):
    topo, s = inst.topology, inst.catalog.sizes
    mr, mm, cm = 1 / topo.rate_mbs_rsu, 1 / topo.rate_mbs_mbs, 1 / topo.rate_cloud_mbs
    return s * mr, s * (mm - mr), s * mr, s * (cm - mm - mr)


def _cluster_terms(inst, u, v, counter):
    topo = inst.topology
    R, M, F = inst.shape
    A = np.ones((M, F))
    rho_m = np.zeros((M, F))
    for m, idx in enumerate(topo.members):
        if idx.size:
            A[m] = np.prod(u[idx], axis=0)
            rho_m[m] = inst.rho[idx].sum(axis=0)
    Y = np.prod(v, axis=0)
    X = np.prod(A, axis=0)
    _tally(counter, u, u, v, A)
    return A, rho_m, X, Y


def expected_cost(inst: ProblemInstance, rp: RelaxedPlacement, counter=None) -> float:
    """Expected caching cost W at the relaxed placement ``rp``."""
    _check_dims(inst, rp)
    a1, a2, a3, a4 = _coefficients(inst)
    u = sigmoid(-rp.xt)
    v = sigmoid(-rp.yt)
    A, rho_m, X, Y = _cluster_terms(inst, u, v, counter)
    cl = inst.topology.cluster_of
    rsu_part = inst.rho * a1 * u * (1.0 + v[cl])
    cluster_part = rho_m * A * (a2 * v + a3 * Y)
    total_part = inst.rho.sum(axis=0) * a4 * X * Y
    _tally(counter, rsu_part, rsu_part, rsu_part, cluster_part, cluster_part, cluster_part, total_part)
    return float(rsu_part.sum() + cluster_part.sum() + total_part.sum())


def cost_gradient(inst: ProblemInstance, rp: RelaxedPlacement, counter=None) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient ``(w_xt, w_yt)`` of :func:`expected_cost`."""
    return cost_and_gradient(inst, rp, counter)[1]


def cost_and_gradient(inst: ProblemInstance, rp: RelaxedPlacement, counter=None):
    """``(W, (w_xt, w_yt))`` from one shared pass over the products."""
    _check_dims(inst, rp)
    topo = inst.topology
    R, M, F = inst.shape
    a1, a2, a3, a4 = _coefficients(inst)
    x, u = sigmoid(rp.xt), sigmoid(-rp.xt)
    y, v = sigmoid(rp.yt), sigmoid(-rp.yt)
    A, rho_m, X, Y = _cluster_terms(inst, u, v, counter)
    cl = topo.cluster_of
    rho_tot = inst.rho.sum(axis=0)

    rsu_lin = inst.rho * a1 * (1.0 + v[cl])
    cluster_lin = rho_m * (a2 * v + a3 * Y)
    total_lin = rho_tot * a4 * Y
    W = float((rsu_lin * u).sum() + (cluster_lin * A).sum() + (total_lin * X).sum())

    A_excl = _prod_except(A)           # product of A over the other clusters
    Y_excl = _prod_except(v)           # product of v over the other MBSs
    u_excl = np.empty_like(u)          # product of u over the rest of the cluster
    for idx in topo.members:
        if idx.size:
            u_excl[idx] = _prod_except(u[idx])
    _tally(counter, A_excl, Y_excl, u_excl, u_excl)

    d_u = rsu_lin + (cluster_lin[cl] + total_lin * A_excl[cl]) * u_excl
    rsu_u = np.zeros((M, F))
    np.add.at(rsu_u, cl, inst.rho * u)
    d_v = (
        a1 * rsu_u
        + rho_m * a2 * A
        + a3 * Y_excl * (rho_m * A).sum(axis=0)
        + rho_tot * a4 * X * Y_excl
    )
    _tally(counter, *([d_u] * 10), *([d_v] * 10))
    # du/dxt = -x u
    w_x = -d_u * x * u
    w_y = -d_v * y * v
    _tally(counter, w_x, w_x, w_y, w_y)
    return W, (w_x, w_y)


def constraints(rp: RelaxedPlacement, catalog: Catalog, capacities: Capacities, counter=None) -> Constraints:
    """Capacity constraint values and gradients at ``rp``."""
    s = catalog.sizes
    if rp.xt.shape[1] != s.size:
        raise ValueError("relaxed placement and catalog disagree on the file count")
    if rp.xt.shape[0] != capacities.rsu.size or rp.yt.shape[0] != capacities.mbs.size:
        raise ValueError("relaxed placement and capacities disagree on node counts")
    x, y = sigmoid(rp.xt), sigmoid(rp.yt)
    P = x @ s - capacities.rsu
    Q = y @ s - capacities.mbs
    p = x * sigmoid(-rp.xt) * s
    q = y * sigmoid(-rp.yt) * s
    _tally(counter, x, x, y, y, p, p, q, q)
    return Constraints(P, p, Q, q)


def binary_cost(inst: ProblemInstance, placement: Placement) -> float:
    """Expected cost of a binary placement via the tier resolution."""
    _, delays = delay_matrix(placement, inst.topology, inst.catalog)
    return float((inst.rho * delays).sum())


def _check_dims(inst, rp):
    R, M, F = inst.shape
    if rp.xt.shape != (R, F) or rp.yt.shape != (M, F):
        raise ValueError(
            f"relaxed placement shapes {rp.xt.shape}, {rp.yt.shape} do not match "
            f"instance ({R}, {F}), ({M}, {F})"
        )


@dataclass(frozen=True)
class LipschitzEstimate:
    w: float
    rsu: float
    mbs: float


def _max_ratio(grad, dim, samples, bound, rng):
    best = 0.0
    for k in range(samples):
        a = rng.uniform(-bound, bound, dim)
        scale = np.exp(rng.uniform(np.log(1e-3), np.log(bound)))
        if k % 2:
            d = rng.standard_normal(dim)
            d *= scale / np.linalg.norm(d)
        else:
            d = np.zeros(dim)
            d[rng.integers(dim)] = scale * rng.choice([-1.0, 1.0])
        b = np.clip(a + d, -bound, bound)
        dist = np.linalg.norm(a - b)
        if dist == 0:
            continue
        best = max(best, np.linalg.norm(grad(a) - grad(b)) / dist)
    return best


def lipschitz_estimate(inst: ProblemInstance, samples: int = 200, seed: int = 0,
                       bound: float = 6.0, safety: float = 2.0) -> LipschitzEstimate:
    """Empirical Lipschitz constants of the gradients of W, P_r and Q_m.

    Takes the largest ratio ``|grad(a) - grad(b)| / |a - b|`` over sampled
    pairs in ``[-bound, bound]^dim`` and multiplies it by ``safety``. Half of
    the pairs differ along a single coordinate, which probes the curvature
    of each sigmoid directly.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    R, M, F = inst.shape
    template = RelaxedPlacement.full(R, M, F)
    s = inst.catalog.sizes

    def grad_w(z):
        gx, gy = cost_gradient(inst, template.with_flat(z))
        return np.concatenate([gx.ravel(), gy.ravel()])

    def grad_row(z):
        return sigmoid(z) * sigmoid(-z) * s

    lam_w = _max_ratio(grad_w, (R + M) * F, samples, bound, rng)
    lam_r = _max_ratio(grad_row, F, samples, bound, rng) if R else 0.0
    lam_m = _max_ratio(grad_row, F, samples, bound, rng) if M else 0.0
    return LipschitzEstimate(safety * lam_w, safety * lam_r, safety * lam_m)
