"""Adaptive-penalty gradient method for the relaxed cooperative placement,
plus greedy rounding back to a feasible 0-1 placement.

The extended objective is

    L = W + 1/2 sum_r beta_r relu(P_r)^2 + 1/2 sum_m beta_m relu(Q_m)^2

and every iteration picks the coefficients from the current gradients
before taking a gradient step on ``L``. The shared rule uses one ``beta``
for every constraint; the default blockwise rule picks one per node.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .delay import Placement, delay_matrix
from .objective import (
    Constraints,
    ProblemInstance,
    RelaxedPlacement,
    constraints,
    cost_and_gradient,
    expected_cost,
    lipschitz_estimate,
)

log = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "SolverState",
    "SolveReport",
    "SolverError",
    "DegenerateInstanceError",
    "extended_objective",
    "compute_penalty",
    "compute_block_penalty",
    "penalty_gradient",
    "step",
    "solve",
    "round_placement",
    "fill_by_score",
    "exhaustive_optimum",
    "write_trace_csv",
]

DESCENT_SLACK = 1e-12


class SolverError(RuntimeError):
    pass


class DegenerateInstanceError(SolverError):
    """A violated constraint has a vanishing gradient."""


@dataclass(frozen=True)
class SolverConfig:
    eta: float = 0.5
    max_iters: int = 5000
    window: int = 10
    rel_tol: float = 1e-6
    mode: str = "practical"
    penalty: str = "blockwise"
    normalize: bool = True
    feasibility_rate: float = 0.05
    seed: int = 0
    init_noise: float = 0.01
    lipschitz_samples: int = 50
    lipschitz_bound: float = 6.0
    max_halvings: int = 40

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.mode not in ("practical", "strict"):
            raise ValueError(f"mode must be 'practical' or 'strict', got {self.mode!r}")
        if self.penalty not in ("blockwise", "shared"):
            raise ValueError(f"penalty must be 'blockwise' or 'shared', got {self.penalty!r}")


@dataclass
class SolverState:
    """Iterate, current penalty and per-iteration history.

    ``beta`` is the pair ``(beta_rsu, beta_mbs)`` of per-constraint penalty
    coefficients used by the last step; the shared rule fills both with one
    value. ``history`` holds ``(W, L, max beta, max_violation)`` after each
    step.
    """

    rp: RelaxedPlacement
    beta: tuple = None
    iteration: int = 0
    history: list = field(default_factory=list)
    last_eta: float = 0.0
    # (W, gradient, constraints) at rp, filled by the step that produced it
    cache: tuple = field(default=None, repr=False, compare=False)

    def evaluate(self, inst, counter=None):
        if self.cache is None:
            W, w = cost_and_gradient(inst, self.rp, counter)
            self.cache = (W, w, constraints(self.rp, inst.catalog, inst.capacities, counter))
        return self.cache


@dataclass
class SolveReport:
    rp: RelaxedPlacement
    placement: Placement
    trace: list
    iterations: int
    reason: str
    lipschitz: object = None

    @property
    def converged(self) -> bool:
        return self.reason == "converged"


def _relu(a):
    return np.maximum(a, 0.0)


def _split_beta(beta, cons):
    """Per-constraint coefficients from a scalar or an (rsu, mbs) pair."""
    if beta is None:
        beta = 0.0
    if np.isscalar(beta):
        if beta < 0:
            raise ValueError(f"penalty coefficient must be nonnegative, got {beta}")
        return np.full(cons.P.size, float(beta)), np.full(cons.Q.size, float(beta))
    b_r, b_m = beta
    if np.shape(b_r) != cons.P.shape or np.shape(b_m) != cons.Q.shape:
        raise ValueError("penalty coefficients do not match the constraints")
    if (b_r < 0).any() or (b_m < 0).any():
        raise ValueError("penalty coefficients must be nonnegative")
    return b_r, b_m


def _beta_max(beta) -> float:
    if beta is None:
        return 0.0
    if np.isscalar(beta):
        return float(beta)
    return float(max([0.0, *(np.max(b) for b in beta if np.size(b))]))


def _penalty_term(cons, beta):
    b_r, b_m = _split_beta(beta, cons)
    return 0.5 * float(b_r @ _relu(cons.P) ** 2 + b_m @ _relu(cons.Q) ** 2)


def extended_objective(inst: ProblemInstance, rp: RelaxedPlacement, beta,
                       cons: Constraints | None = None) -> float:
    """``L = W + 1/2 sum beta_r relu(P_r)^2 + 1/2 sum beta_m relu(Q_m)^2``.

    ``beta`` is a scalar shared by all constraints or an ``(rsu, mbs)`` pair
    of coefficient arrays.
    """
    if cons is None:
        cons = constraints(rp, inst.catalog, inst.capacities)
    return expected_cost(inst, rp) + _penalty_term(cons, beta)


def penalty_gradient(w, cons: Constraints, beta):
    """Gradient of L: ``w + beta_r * relu(P_r) * p_r`` per block."""
    w_x, w_y = w
    b_r, b_m = _split_beta(beta, cons)
    g_x = w_x + (b_r * _relu(cons.P))[:, None] * cons.p
    g_y = w_y + (b_m * _relu(cons.Q))[:, None] * cons.q
    return g_x, g_y


def _penalty(w, cons: Constraints, eta: float):
    w_x, w_y = w
    vr = cons.P > 0
    vm = cons.Q > 0
    if not (vr.any() or vm.any()):
        return 0.0, "satisfied"

    pr_sq = np.sum(cons.p[vr] ** 2, axis=1)
    qm_sq = np.sum(cons.q[vm] ** 2, axis=1)
    if np.any(pr_sq == 0) or np.any(qm_sq == 0):
        raise DegenerateInstanceError("violated capacity constraint with zero gradient")
    wp = np.sum(w_x[vr] * cons.p[vr], axis=1)
    wq = np.sum(w_y[vm] * cons.q[vm], axis=1)
    beta_r = -wp / (cons.P[vr] * pr_sq)
    beta_m = -wq / (cons.Q[vm] * qm_sq)
    bounds = np.concatenate([beta_r, beta_m])
    phi = float(np.sum(cons.P[vr] * wp) + np.sum(cons.Q[vm] * wq))
    w_sq = float(np.sum(w_x ** 2) + np.sum(w_y ** 2))

    if phi >= 0:
        return max(0.0, float(bounds.max())), "aligned"
    ceiling = -w_sq / phi
    if ceiling > bounds.max():
        return max(0.0, 0.5 * ceiling + 0.5 * float(bounds.max())), "midpoint"
    if eta > 0:
        eps = np.concatenate([1.0 / (eta * pr_sq), 1.0 / (eta * qm_sq)])
    else:
        eps = np.zeros_like(bounds)  # no step is taken, so no margin is needed
    return max(0.0, float((bounds + eps).max())), "fallback"


def compute_penalty(inst: ProblemInstance, rp: RelaxedPlacement, w, cons: Constraints, eta: float) -> float:
    """Shared penalty coefficient for the next step.

    With every constraint satisfied the penalty is 0. Otherwise each
    violated constraint ``r`` gives a lower bound
    ``beta_r = -(w_r . p_r) / (P_r |p_r|^2)`` above which the step shrinks
    the overrun, and ``phi = sum relu(P_r) p_r . w_r`` (plus the MBS terms)
    decides the branch: ``phi >= 0`` takes the largest bound (at least 0);
    ``phi < 0`` takes the midpoint between the largest bound and the
    objective-descent ceiling ``-|w|^2 / phi`` when that ceiling is higher;
    otherwise every bound is raised by ``1 / (eta |p_r|^2)``, enough to
    cancel the overrun to first order in one step.
    """
    return _penalty(w, cons, eta)[0]


def _block_rule(P, p, w, eta, rate=0.0):
    viol = P > 0
    if not viol.any():
        return np.zeros(P.size)
    pp = np.einsum("ij,ij->i", p, p)
    if np.any(pp[viol] == 0):
        raise DegenerateInstanceError("violated capacity constraint with zero gradient")
    wp = np.einsum("ij,ij->i", w, p)
    ww = np.einsum("ij,ij->i", w, w)
    Pv = np.where(viol, P, 1.0)
    pp = np.where(viol, pp, 1.0)
    bound = -wp / (Pv * pp)
    phi = Pv * wp
    with np.errstate(divide="ignore", invalid="ignore"):
        ceiling = np.where(phi < 0, -ww / phi, np.inf)
    eps = 1.0 / (eta * pp) if eta > 0 else 0.0
    b = np.where(phi >= 0, bound, np.where(ceiling > bound, 0.5 * ceiling + 0.5 * bound, bound + eps))
    if rate > 0:
        # remove at least a fraction ``rate`` of the overrun, to first order
        b = np.maximum(b, bound + rate * eps)
    return np.where(viol, np.maximum(b, 0.0), 0.0)


def compute_block_penalty(w, cons: Constraints, eta: float, rate: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-constraint penalty coefficients ``(beta_rsu, beta_mbs)``.

    Applies the rule of :func:`compute_penalty` to each capacity block on
    its own, with ``phi`` and ``|w|^2`` restricted to the variables of that
    block. Blocks touch disjoint variables, so each block's descent
    conditions add up to the global ones, while a tightly violated node no
    longer forces a huge coefficient onto every other node.
    """
    w_x, w_y = w
    return _block_rule(cons.P, cons.p, w_x, eta, rate), _block_rule(cons.Q, cons.q, w_y, eta, rate)


def _eta_bounds(w, cons, beta, g, lam):
    """Largest stepsizes for which the descent conditions are guaranteed."""
    w_x, w_y = w
    g_x, g_y = g
    b_r, b_m = _split_beta(beta, cons)
    bounds = []
    g_sq = float(np.sum(g_x ** 2) + np.sum(g_y ** 2))
    if g_sq > 0 and lam.w > 0:
        cross = float(np.sum(b_r * _relu(cons.P) * np.sum(cons.p * w_x, axis=1))
                      + np.sum(b_m * _relu(cons.Q) * np.sum(cons.q * w_y, axis=1)))
        w_sq = float(np.sum(w_x ** 2) + np.sum(w_y ** 2))
        bounds.append(2 * (w_sq + cross) / (lam.w * g_sq))
    for P, p, wb, gb, bb, lam_c in ((cons.P, cons.p, w_x, g_x, b_r, lam.rsu),
                                    (cons.Q, cons.q, w_y, g_y, b_m, lam.mbs)):
        if lam_c <= 0:
            continue
        for i in np.flatnonzero(P > 0):
            gi = float(np.sum(gb[i] ** 2))
            if gi > 0:
                bounds.append(2 * (wb[i] @ p[i] + bb[i] * P[i] * (p[i] @ p[i])) / (lam_c * gi))
        for i in np.flatnonzero(P <= 0):
            wi = float(np.sum(wb[i] ** 2))
            disc = (wb[i] @ p[i]) ** 2 - 2 * lam_c * wi * P[i]
            if wi > 0 and disc >= 0:
                bounds.append((wb[i] @ p[i] + np.sqrt(disc)) / (lam_c * wi))
    return [b for b in bounds if np.isfinite(b) and b > 0]


def step(inst: ProblemInstance, state: SolverState, cfg: SolverConfig, lipschitz=None, counter=None) -> SolverState:
    """One penalty update plus one gradient step; returns a new state."""
    rp = state.rp
    _, w, cons = state.evaluate(inst, counter)
    if cfg.penalty == "shared":
        beta = compute_penalty(inst, rp, w, cons, cfg.eta)
    else:
        beta = compute_block_penalty(w, cons, cfg.eta, cfg.feasibility_rate)
    g = penalty_gradient(w, cons, beta)
    if counter is not None:
        counter.add(*g, *g, cons.p, cons.q)
    if not (np.all(np.isfinite(g[0])) and np.all(np.isfinite(g[1]))):
        raise SolverError(f"non-finite gradient at iteration {state.iteration}")

    if cfg.mode == "strict":
        if lipschitz is None:
            lipschitz = lipschitz_estimate(inst, cfg.lipschitz_samples, cfg.seed, cfg.lipschitz_bound)
        return _strict_step(inst, state, cfg, w, cons, beta, g, lipschitz)

    new_rp = RelaxedPlacement(rp.xt - cfg.eta * g[0], rp.yt - cfg.eta * g[1])
    if counter is not None:
        counter.add(*g)
    return _advance(inst, state, new_rp, beta, cfg.eta, counter=counter)


def _advance(inst, state, new_rp, beta, eta, L=None, cons=None, W=None, counter=None):
    new = SolverState(new_rp, beta, state.iteration + 1, None, eta)
    if cons is None or W is None:
        W, _, cons = new.evaluate(inst, counter)
    if L is None:
        L = W + _penalty_term(cons, beta)
    new.history = state.history + [(W, L, _beta_max(beta), cons.max_violation)]
    return new


def _strict_step(inst, state, cfg, w, cons, beta, g, lam):
    rp = state.rp
    W_old = state.evaluate(inst)[0]
    if state.history:
        L_ref, beta_ref = state.history[-1][1], state.beta
    else:
        L_ref, beta_ref = W_old + _penalty_term(cons, beta), beta
    violated_r, violated_m = cons.P > 0, cons.Q > 0

    def trial(eta, beta_t, g_t):
        cand = RelaxedPlacement(rp.xt - eta * g_t[0], rp.yt - eta * g_t[1])
        c = constraints(cand, inst.catalog, inst.capacities)
        W = expected_cost(inst, cand)
        return cand, c, W, W + _penalty_term(c, beta_t)

    eta = min([cfg.eta] + _eta_bounds(w, cons, beta, g, lam))
    for _ in range(cfg.max_halvings + 1):
        cand, c, W, L = trial(eta, beta, g)
        props_hold = (
            W <= W_old + DESCENT_SLACK
            and np.all(c.P[violated_r] <= cons.P[violated_r])
            and np.all(c.Q[violated_m] <= cons.Q[violated_m])
        )
        if props_hold and L <= L_ref + DESCENT_SLACK:
            return _advance(inst, state, cand, beta, eta, L, c, W)
        eta *= 0.5

    # fall back to the penalty that produced the reference value; its own
    # gradient is a descent direction for L at that penalty
    g_ref = penalty_gradient(w, cons, beta_ref)
    eta = cfg.eta
    for _ in range(cfg.max_halvings + 1):
        cand, c, W, L = trial(eta, beta_ref, g_ref)
        if L <= L_ref + DESCENT_SLACK:
            return _advance(inst, state, cand, beta_ref, eta, L, c, W)
        eta *= 0.5
    log.debug("strict step stalled at iteration %d", state.iteration)
    return _advance(inst, state, rp, beta_ref, 0.0, L_ref, cons, W_old)


def _converged(history, window, rel_tol):
    if len(history) < 2 * window:
        return False
    L = np.array([h[1] for h in history[-2 * window:]])
    prev, last = L[:window].mean(), L[window:].mean()
    if prev == last:
        return True
    return abs(last - prev) / max(abs(prev), np.finfo(float).tiny) < rel_tol


def initial_state(inst: ProblemInstance, cfg: SolverConfig) -> SolverState:
    R, M, F = inst.shape
    rng = np.random.default_rng(cfg.seed)
    xt = rng.uniform(-cfg.init_noise, cfg.init_noise, (R, F))
    yt = rng.uniform(-cfg.init_noise, cfg.init_noise, (M, F))
    return SolverState(RelaxedPlacement(xt, yt))


def solve(inst: ProblemInstance, cfg: SolverConfig = SolverConfig(), counter=None) -> SolveReport:
    """Run the adaptive penalty method and round the result.

    Stops when the window-averaged relative change of L drops below
    ``cfg.rel_tol`` or after ``cfg.max_iters`` steps. Without convergence
    the best iterate (least violation, then lowest W) is rounded instead of
    the last one.

    With ``cfg.normalize`` the weights are divided by the largest entry of
    the initial gradient, so ``eta`` is a step in sigmoid-input units
    whatever the demand scale. W is linear in the weights, so this only
    changes units; the trace is reported in the original ones.
    """
    state = initial_state(inst, cfg)
    scale = 1.0
    if cfg.normalize:
        w_x, w_y = state.evaluate(inst)[1]
        top = max(np.abs(w_x).max(initial=0.0), np.abs(w_y).max(initial=0.0))
        if top > 0:
            scale = float(top)
            inst = ProblemInstance(inst.topology, inst.catalog, inst.capacities,
                                   inst.residence / scale, inst.demand)
            state = initial_state(inst, cfg)
    lam = None
    if cfg.mode == "strict":
        lam = lipschitz_estimate(inst, cfg.lipschitz_samples, cfg.seed, cfg.lipschitz_bound)
    best_key, best_rp = None, state.rp
    reason = "max_iters"
    for _ in range(cfg.max_iters):
        state = step(inst, state, cfg, lam, counter)
        W, _, _, viol = state.history[-1]
        key = (viol, W)
        if best_key is None or key < best_key:
            best_key, best_rp = key, state.rp
        if _converged(state.history, cfg.window, cfg.rel_tol):
            reason = "converged"
            break
    rp = state.rp if reason == "converged" else best_rp
    placement = round_placement(rp, inst.catalog, inst.capacities)
    trace = state.history
    if scale != 1.0:
        trace = [(W * scale, L * scale, beta * scale, viol) for W, L, beta, viol in trace]
    return SolveReport(rp, placement, trace, state.iteration, reason, lam)


def fill_by_score(scores, sizes, cap) -> np.ndarray:
    """0-1 row admitting files by descending score while they fit."""
    # descending score, ties to the lower file index
    order = np.lexsort((np.arange(scores.size), -scores))
    row = np.zeros(scores.size, dtype=np.int8)
    used = 0.0
    for f in order:
        if used + sizes[f] <= cap:
            row[f] = 1
            used += sizes[f]
    return row


def round_placement(rp: RelaxedPlacement, catalog, capacities) -> Placement:
    """Greedy per-node rounding: admit files by descending score while they fit."""
    s = catalog.sizes
    x = np.array([fill_by_score(row, s, cap) for row, cap in zip(rp.xt, capacities.rsu)]).reshape(rp.xt.shape)
    y = np.array([fill_by_score(row, s, cap) for row, cap in zip(rp.yt, capacities.mbs)]).reshape(rp.yt.shape)
    return Placement(x, y)


def _feasible_rows(sizes, cap):
    F = sizes.size
    rows = np.array(list(itertools.product((0, 1), repeat=F)), dtype=np.int8)
    return rows[rows @ sizes <= cap]


def exhaustive_optimum(inst: ProblemInstance, max_vars: int = 20) -> tuple[Placement, float]:
    """Minimum-cost feasible binary placement by full enumeration."""
    R, M, F = inst.shape
    nodes = R + M
    if nodes * F > max_vars:
        raise ValueError(f"{nodes * F} binary variables exceed the enumeration limit {max_vars}")
    s = inst.catalog.sizes
    options = [_feasible_rows(s, c) for c in inst.capacities.rsu] + [_feasible_rows(s, c) for c in inst.capacities.mbs]

    # cost of each file column under every node bit-pattern
    table = np.zeros((2 ** nodes, F))
    for pattern in range(2 ** nodes):
        bits = np.array([(pattern >> k) & 1 for k in range(nodes)], dtype=np.int8)
        pl = Placement(np.repeat(bits[:R, None], F, axis=1), np.repeat(bits[R:, None], F, axis=1))
        _, delays = delay_matrix(pl, inst.topology, inst.catalog)
        table[pattern] = (inst.rho * delays).sum(axis=0)

    grids = np.meshgrid(*[np.arange(len(o)) for o in options], indexing="ij")
    combo = [g.ravel() for g in grids]
    pattern = np.zeros((combo[0].size, F), dtype=np.int64)
    for k, (opt, idx) in enumerate(zip(options, combo)):
        pattern |= opt[idx].astype(np.int64) << k
    costs = table[pattern, np.arange(F)].sum(axis=1)
    best = int(np.argmin(costs))
    rows = np.array([options[k][combo[k][best]] for k in range(nodes)]).reshape(nodes, F)
    return Placement(rows[:R], rows[R:]), float(costs[best])


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "W", "L", "beta", "max_violation"])
        for k, (W, L, beta, viol) in enumerate(trace, start=1):
            writer.writerow([k, f"{W:.6e}", f"{L:.6e}", f"{beta:.6e}", f"{viol:.6e}"])
