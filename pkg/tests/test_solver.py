import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopcache import Capacities, Catalog, Placement, ProblemInstance, RelaxedPlacement, SolverConfig, solve
from coopcache.objective import Constraints, binary_cost, constraints, cost_gradient, expected_cost
from coopcache.solver import (
    DegenerateInstanceError,
    SolverState,
    compute_block_penalty,
    compute_penalty,
    exhaustive_optimum,
    extended_objective,
    fill_by_score,
    initial_state,
    penalty_gradient,
    round_placement,
    step,
    write_trace_csv,
)

from conftest import central_diff, make_topology, random_instance, random_point, rel_err, tiny_instance


def _cons(P, p, Q=None, q=None):
    P, p = np.atleast_1d(np.asarray(P, float)), np.atleast_2d(np.asarray(p, float))
    F = p.shape[1]
    Q = np.zeros(0) if Q is None else np.atleast_1d(np.asarray(Q, float))
    q = np.zeros((0, F)) if q is None else np.atleast_2d(np.asarray(q, float))
    return Constraints(P, p, Q, q)


def _w(wx):
    wx = np.atleast_2d(np.asarray(wx, float))
    return wx, np.zeros((0, wx.shape[1]))


def _unit_instance(R=1, M=1, F=4, rsu_cap=1.0, mbs_cap=2.0, demand=0.5):
    topo = make_topology([R] + [0] * (M - 1))
    return ProblemInstance(topo, Catalog.uniform(F), Capacities.uniform(R, M, rsu_cap, mbs_cap),
                           np.ones((2, R)), np.full((2, F), demand))


# -- extended objective ----------------------------------------------------

def test_penalty_vanishes_when_satisfied(rng):
    inst = _unit_instance(rsu_cap=4.0, mbs_cap=4.0)
    rp = random_point(rng, inst)
    W = expected_cost(inst, rp)
    assert extended_objective(inst, rp, 7.0) == W
    assert extended_objective(inst, rp, 0.0) == W


def test_single_violation_hand_value():
    inst = _unit_instance()                  # P = 4 * 0.5 - 1 = 1, Q = 0
    rp = RelaxedPlacement.full(1, 1, 4, 0.0)
    W = expected_cost(inst, rp)
    assert extended_objective(inst, rp, 2.0) == pytest.approx(W + 1.0, rel=1e-15)
    assert extended_objective(inst, rp, (np.array([2.0]), np.array([5.0]))) == pytest.approx(W + 1.0)


def test_negative_beta_rejected():
    inst = _unit_instance()
    with pytest.raises(ValueError):
        extended_objective(inst, RelaxedPlacement.full(1, 1, 4), -1.0)


def test_penalty_gradient_matches_fd(rng):
    inst = random_instance(rng, R=3, M=2, F=4)
    inst = ProblemInstance(inst.topology, inst.catalog, Capacities.uniform(3, 2, 0.5, 0.5),
                           inst.residence, inst.demand)
    rp = random_point(rng, inst)
    cons = constraints(rp, inst.catalog, inst.capacities)
    beta = (rng.uniform(0, 3, 3), rng.uniform(0, 3, 2))
    g_x, g_y = penalty_gradient(cost_gradient(inst, rp), cons, beta)
    fd = central_diff(lambda v: extended_objective(inst, rp.with_flat(v), beta), rp.flat())
    assert rel_err(np.concatenate([g_x.ravel(), g_y.ravel()]), fd) < 1e-6


# -- penalty rule ------------------------------------------------------------

def test_no_violation_gives_zero_and_plain_gradient():
    cons = _cons([-1.0], [[1.0, 2.0]])
    w = _w([[-0.3, 0.4]])
    assert compute_penalty(None, None, w, cons, 0.1) == 0.0
    g = penalty_gradient(w, cons, 0.0)
    assert np.array_equal(g[0], w[0])
    b_r, _ = compute_block_penalty(w, cons, 0.1)
    assert np.all(b_r == 0.0)


def test_lower_bound_value_in_aligned_branch():
    # row 0: w.p = -2, P = 1, |p|^2 = 4 -> bound 0.5; row 1 makes phi >= 0
    cons = _cons([1.0, 1.0], [[2.0, 0.0], [1.0, 0.0]])
    w = _w([[-1.0, 0.0], [3.0, 0.0]])
    assert compute_penalty(None, None, w, cons, 0.1) == pytest.approx(0.5)


def test_single_violation_example_is_not_aligned():
    # with one violated row phi = P (w.p) = -2 < 0, so the aligned branch
    # cannot apply; the ceiling |w|^2 / 2 = 0.5 equals the bound -> fallback
    cons = _cons([1.0], [[2.0, 0.0]])
    w = _w([[-1.0, 0.0]])
    assert compute_penalty(None, None, w, cons, 0.1) == pytest.approx(0.5 + 2.5)


def test_midpoint_branch():
    cons = _cons([1.0], [[2.0, 0.0]])
    w = _w([[-1.0, 3.0]])                   # |w|^2 = 10, phi = -2, ceiling 5
    assert compute_penalty(None, None, w, cons, 0.1) == pytest.approx(0.5 * 5 + 0.5 * 0.5)


def test_fallback_margin():
    cons = _cons([1.0], [[2.0, 0.0]])
    w = _w([[-1.0, 0.0]])
    assert compute_penalty(None, None, w, cons, 0.1) - 0.5 == pytest.approx(2.5)
    # eta = 0 takes no step, so no margin is added
    assert compute_penalty(None, None, w, cons, 0.0) == pytest.approx(0.5)


def test_mbs_margin_uses_mbs_gradient():
    cons = Constraints(np.zeros(0), np.zeros((0, 2)), np.array([1.0]), np.array([[2.0, 0.0]]))
    w = (np.zeros((0, 2)), np.array([[-1.0, 0.0]]))
    assert compute_penalty(None, None, w, cons, 0.1) == pytest.approx(3.0)


def test_block_rule_is_row_local():
    cons = _cons([1.0, -1.0, 1.0], [[2.0, 0.0], [1.0, 1.0], [1.0, 0.0]])
    w = _w([[-1.0, 3.0], [5.0, 5.0], [-1.0, 0.0]])
    b_r, b_m = compute_block_penalty(w, cons, 0.1)
    assert b_m.size == 0
    assert b_r[0] == pytest.approx(compute_penalty(None, None, _w(w[0][:1]), _cons([1.0], [[2.0, 0.0]]), 0.1))
    assert b_r[1] == 0.0
    assert b_r[2] == pytest.approx(compute_penalty(None, None, _w(w[0][2:]), _cons([1.0], [[1.0, 0.0]]), 0.1))


def test_feasibility_rate_floor():
    cons = _cons([1.0], [[1.0, 0.0]])
    w = _w([[3.0, 0.0]])                    # aligned, bound -3 -> 0
    assert compute_block_penalty(w, cons, 0.1)[0][0] == 0.0
    assert compute_block_penalty(w, cons, 0.1, rate=0.5)[0][0] == pytest.approx(-3.0 + 0.5 * 10.0)


def test_degenerate_violation():
    inst = _unit_instance(rsu_cap=0.0)
    rp = RelaxedPlacement.full(1, 1, 4, 1000.0)
    cons = constraints(rp, inst.catalog, inst.capacities)
    w = cost_gradient(inst, rp)
    with pytest.raises(DegenerateInstanceError):
        compute_penalty(inst, rp, w, cons, 0.1)
    with pytest.raises(DegenerateInstanceError):
        compute_block_penalty(w, cons, 0.1)


# -- steps -------------------------------------------------------------------

def test_zero_demand_step_is_identity():
    inst = _unit_instance(rsu_cap=4.0, mbs_cap=4.0, demand=0.0)
    state = initial_state(inst, SolverConfig())
    new = step(inst, state, SolverConfig())
    assert np.array_equal(new.rp.xt, state.rp.xt) and np.array_equal(new.rp.yt, state.rp.yt)
    assert new.iteration == 1 and len(new.history) == 1


def test_zero_stepsize_is_identity(rng):
    inst = random_instance(rng, R=3, M=2, F=4)
    state = SolverState(random_point(rng, inst))
    new = step(inst, state, SolverConfig(eta=0.0))
    assert np.array_equal(new.rp.xt, state.rp.xt) and np.array_equal(new.rp.yt, state.rp.yt)


def test_strict_steps_never_increase_L(rng):
    for _ in range(5):
        inst = random_instance(rng, max_rsu=3, max_files=5)
        cfg = SolverConfig(mode="strict", max_iters=30, lipschitz_samples=20)
        rep = solve(inst, cfg)
        L = [h[1] for h in rep.trace]
        assert all(b <= a + 1e-12 for a, b in zip(L, L[1:]))


def test_shared_penalty_mode_runs(rng):
    inst = random_instance(rng, R=3, M=1, F=4)
    rep = solve(inst, SolverConfig(penalty="shared", max_iters=200))
    assert rep.placement.is_feasible(inst.catalog, inst.capacities)


def test_config_validation():
    for bad in ({"eta": -1.0}, {"max_iters": 0}, {"window": 0}, {"mode": "fast"}, {"penalty": "x"}):
        with pytest.raises(ValueError):
            SolverConfig(**bad)


# -- solve -------------------------------------------------------------------

def test_roomy_caches_cache_everything(rng):
    inst = random_instance(rng, R=3, M=2, F=4)
    total = inst.catalog.sizes.sum()
    inst = ProblemInstance(inst.topology, inst.catalog, Capacities.uniform(3, 2, total, total),
                           inst.residence, inst.demand)
    rep = solve(inst, SolverConfig(max_iters=2000))
    assert np.all(rep.placement.x == 1)
    assert binary_cost(inst, rep.placement) < 1e-6
    W = [h[0] for h in rep.trace]
    assert W[-1] < 0.05 * W[0]


def test_tiny_instance_near_optimum():
    inst = tiny_instance(0)
    _, best = exhaustive_optimum(inst)
    cost = binary_cost(inst, solve(inst, SolverConfig(max_iters=1000)).placement)
    assert best <= cost <= 1.05 * best


def test_solve_is_deterministic(rng):
    inst = random_instance(rng, R=3, M=2, F=5)
    a, b = solve(inst, SolverConfig(max_iters=300, seed=4)), solve(inst, SolverConfig(max_iters=300, seed=4))
    assert a.trace == b.trace and a.placement == b.placement and a.iterations == b.iterations
    assert np.array_equal(a.rp.xt, b.rp.xt)


def test_history_length_and_reason(rng):
    inst = random_instance(rng, R=2, M=1, F=3)
    rep = solve(inst, SolverConfig(max_iters=25, rel_tol=0.0))
    assert rep.iterations == len(rep.trace) == 25
    assert rep.reason == "max_iters" and not rep.converged


def test_normalisation_keeps_original_units(rng):
    inst = random_instance(rng, R=2, M=1, F=3)
    cfg = SolverConfig(max_iters=5)
    rep = solve(inst, cfg)
    assert rep.trace[0][0] == pytest.approx(expected_cost(inst, _first_iterate(inst, cfg)), rel=1e-9)


def _first_iterate(inst, cfg):
    # replay one normalised step by hand
    state = initial_state(inst, cfg)
    w_x, w_y = cost_gradient(inst, state.rp)
    top = max(np.abs(w_x).max(), np.abs(w_y).max())
    scaled = ProblemInstance(inst.topology, inst.catalog, inst.capacities, inst.residence / top, inst.demand)
    return step(scaled, initial_state(scaled, cfg), cfg).rp


def test_trace_csv(tmp_path, rng):
    inst = random_instance(rng, R=2, M=1, F=3)
    rep = solve(inst, SolverConfig(max_iters=7, rel_tol=0.0))
    path = tmp_path / "trace.csv"
    write_trace_csv(rep.trace, path)
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["iteration", "W", "L", "beta", "max_violation"]
    assert [int(r[0]) for r in rows[1:]] == list(range(1, 8))
    assert float(rows[-1][1]) == pytest.approx(rep.trace[-1][0], rel=1e-6)


# -- rounding ----------------------------------------------------------------

def test_round_by_score():
    cat = Catalog.uniform(3)
    rp = RelaxedPlacement(np.array([[2.0, -1.0, 0.5]]), np.zeros((1, 3)))
    p = round_placement(rp, cat, Capacities(np.array([2.0]), np.array([0.0])))
    assert list(p.x[0]) == [1, 0, 1]
    assert list(p.y[0]) == [0, 0, 0]


def test_round_ties_to_lower_ids():
    p = round_placement(RelaxedPlacement.full(1, 1, 4), Catalog.uniform(4), Capacities.uniform(1, 1, 2, 3))
    assert list(p.x[0]) == [1, 1, 0, 0] and list(p.y[0]) == [1, 1, 1, 0]


def test_fill_continues_past_large_files():
    row = fill_by_score(np.array([3.0, 2.0, 1.0]), np.array([1.0, 5.0, 1.0]), 2.0)
    assert list(row) == [1, 0, 1]


def test_exhaustive_optimum_limits(rng):
    inst = random_instance(rng, R=4, M=2, F=4)
    with pytest.raises(ValueError, match="enumeration limit"):
        exhaustive_optimum(inst, max_vars=14)


def test_exhaustive_optimum_is_minimal():
    inst = tiny_instance(3)
    best_p, best = exhaustive_optimum(inst)
    assert best_p.is_feasible(inst.catalog, inst.capacities)
    assert binary_cost(inst, best_p) == pytest.approx(best, rel=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = round_placement(RelaxedPlacement(rng.normal(size=(2, 4)), rng.normal(size=(1, 4))),
                            inst.catalog, inst.capacities)
        assert binary_cost(inst, p) >= best - 1e-12


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rounding_is_always_feasible(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    p = round_placement(random_point(rng, inst, scale=5.0), inst.catalog, inst.capacities)
    used_r, used_m = p.used(inst.catalog)
    assert np.all(used_r <= inst.capacities.rsu) and np.all(used_m <= inst.capacities.mbs)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_solved_placements_are_feasible(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    rep = solve(inst, SolverConfig(max_iters=60, seed=seed % 1000))
    assert isinstance(rep.placement, Placement)
    assert rep.placement.is_feasible(inst.catalog, inst.capacities)
