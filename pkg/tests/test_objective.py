import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coopcache import Capacities, Catalog, Placement, ProblemInstance, RelaxedPlacement
from coopcache.delay import case_delays_all
from coopcache.objective import (
    OpCounter,
    binary_cost,
    constraints,
    cost_and_gradient,
    cost_gradient,
    expected_cost,
    lipschitz_estimate,
    sigmoid,
)

from conftest import central_diff, make_topology, random_instance, random_point, rel_err


def _single(pi=1.0, tau=1.0):
    topo = make_topology([1])
    return ProblemInstance(topo, Catalog.uniform(1), Capacities.uniform(1, 1, 1.0, 1.0),
                           np.array([[tau]]), np.array([[pi]]))


def test_nothing_cached_single_node():
    inst = _single()
    W = expected_cost(inst, RelaxedPlacement.full(1, 1, 1, -40.0))
    assert W == pytest.approx(0.11, abs=1e-12)


def test_everything_local_is_free(rng):
    inst = random_instance(rng, R=3, M=2, F=4)
    rp = RelaxedPlacement(np.full((3, 4), 40.0), rng.normal(size=(2, 4)))
    assert expected_cost(inst, rp) < 1e-12


def test_zero_demand(rng):
    inst = random_instance(rng, R=3, M=2, F=4)
    inst = ProblemInstance(inst.topology, inst.catalog, inst.capacities, inst.residence, np.zeros((5, 4)))
    rp = random_point(rng, inst)
    assert expected_cost(inst, rp) == 0.0
    w_x, w_y = cost_gradient(inst, rp)
    assert np.all(w_x == 0) and np.all(w_y == 0)
    assert lipschitz_estimate(inst, samples=10).w == 0.0


def test_closed_form_matches_tier_polynomials(rng):
    # the collapsed formula against the term-by-term tier polynomials
    for _ in range(30):
        inst = random_instance(rng)
        rp = random_point(rng, inst)
        g = case_delays_all(rp.x, rp.y, inst.topology, inst.catalog)
        direct = float((inst.rho * g.sum(axis=0)).sum())
        assert expected_cost(inst, rp) == pytest.approx(direct, rel=1e-12, abs=1e-14)


def test_cost_and_gradient_agree(rng):
    inst = random_instance(rng, R=4, M=2, F=5)
    rp = random_point(rng, inst)
    W, (w_x, w_y) = cost_and_gradient(inst, rp)
    assert W == pytest.approx(expected_cost(inst, rp), rel=1e-14)
    g_x, g_y = cost_gradient(inst, rp)
    assert np.array_equal(w_x, g_x) and np.array_equal(w_y, g_y)


def test_gradient_seed7_instance():
    inst = random_instance(np.random.default_rng(7), R=2, M=1, F=3)
    rp = random_point(np.random.default_rng(8), inst)
    z = rp.flat()
    fd = central_diff(lambda v: expected_cost(inst, rp.with_flat(v)), z)
    w_x, w_y = cost_gradient(inst, rp)
    assert rel_err(np.concatenate([w_x.ravel(), w_y.ravel()]), fd) < 1e-6


def test_symmetric_rsus_share_gradient():
    topo = make_topology([2])
    inst = ProblemInstance(topo, Catalog.uniform(3), Capacities.uniform(2, 1, 1.0, 1.0),
                           np.array([[1.0, 1.0], [2.0, 2.0]]), np.array([[0.2, 0.5, 0.9], [0.3, 0.1, 0.4]]))
    rp = RelaxedPlacement(np.tile([0.3, -0.2, 0.7], (2, 1)), np.array([[0.1, 0.0, -0.5]]))
    w_x, _ = cost_gradient(inst, rp)
    assert np.array_equal(w_x[0], w_x[1])


def test_near_binary_matches_binary_cost(rng):
    for _ in range(30):
        inst = random_instance(rng)
        R, M, F = inst.shape
        x = rng.integers(0, 2, (R, F))
        y = rng.integers(0, 2, (M, F))
        rp = RelaxedPlacement(np.where(x, 40.0, -40.0), np.where(y, 40.0, -40.0))
        assert abs(expected_cost(inst, rp) - binary_cost(inst, Placement(x, y))) < 1e-9


def test_constraint_values():
    cat, caps = Catalog.uniform(4), Capacities.uniform(2, 1, 1.0, 1.0)
    c = constraints(RelaxedPlacement.full(2, 1, 4, -40.0), cat, caps)
    assert np.all(np.abs(c.P + 1.0) < 1e-12)
    c = constraints(RelaxedPlacement.full(2, 1, 4, 0.0), cat, caps)
    assert np.all(c.P == 1.0) and np.all(c.Q == 1.0)
    assert c.max_violation == 1.0


def test_constraint_gradient_fd(rng):
    inst = random_instance(rng, R=3, M=2, F=5)
    rp = random_point(rng, inst)
    c = constraints(rp, inst.catalog, inst.capacities)
    s, caps = inst.catalog.sizes, inst.capacities
    for r in range(3):
        fd = central_diff(lambda v: sigmoid(v) @ s - caps.rsu[r], rp.xt[r].copy())
        assert rel_err(c.p[r], fd) < 1e-8
    for m in range(2):
        fd = central_diff(lambda v: sigmoid(v) @ s - caps.mbs[m], rp.yt[m].copy())
        assert rel_err(c.q[m], fd) < 1e-8


def test_shape_mismatch_errors(rng):
    inst = random_instance(rng, R=2, M=1, F=3)
    with pytest.raises(ValueError):
        expected_cost(inst, RelaxedPlacement.full(3, 1, 3))
    with pytest.raises(ValueError):
        ProblemInstance(inst.topology, inst.catalog, inst.capacities, np.ones((2, 2)), np.ones((3, 3)) * 0.5)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ProblemInstance(inst.topology, inst.catalog, inst.capacities, np.ones((1, 2)), np.full((1, 3), 1.5))


def test_lipschitz_bound_for_constraints(rng):
    inst = random_instance(rng, R=2, M=1, F=3)
    est = lipschitz_estimate(inst, samples=200, seed=3)
    # |h''| <= 1/(6 sqrt 3); sampled pairs include single-coordinate moves
    assert est.rsu >= 0.5 * 1 / (6 * np.sqrt(3)) * inst.catalog.sizes.max()
    assert est.rsu <= 2 * 1 / (6 * np.sqrt(3)) * inst.catalog.sizes.max() + 1e-12
    assert est == lipschitz_estimate(inst, samples=200, seed=3)
    with pytest.raises(ValueError):
        lipschitz_estimate(inst, samples=1)


def test_op_count_linear_in_problem_size():
    def ops(R, M, F):
        topo = make_topology([R // M] * M)
        inst = ProblemInstance(topo, Catalog.uniform(F), Capacities.uniform(R, M, 2.0, 2.0),
                               np.ones((3, R)), np.full((3, F), 0.5))
        counter = OpCounter()
        cost_and_gradient(inst, RelaxedPlacement.full(R, M, F), counter)
        return counter.ops
    assert ops(8, 2, 40) / ops(4, 1, 20) == pytest.approx(4.0, rel=0.2)


@st.composite
def instances_and_points(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    inst = random_instance(rng)
    return inst, random_point(rng, inst, scale=3.0)


@settings(max_examples=60, deadline=None)
@given(instances_and_points())
def test_gradient_matches_finite_differences(ip):
    inst, rp = ip
    fd = central_diff(lambda v: expected_cost(inst, rp.with_flat(v)), rp.flat())
    w_x, w_y = cost_gradient(inst, rp)
    assert rel_err(np.concatenate([w_x.ravel(), w_y.ravel()]), fd) < 1e-6


@settings(max_examples=60, deadline=None)
@given(instances_and_points(), st.data())
def test_cost_nonnegative_and_monotone(ip, data):
    inst, rp = ip
    W = expected_cost(inst, rp)
    assert W >= 0.0
    z = rp.flat()
    i = data.draw(st.integers(0, z.size - 1))
    z[i] += data.draw(st.floats(0.01, 5.0))
    assert expected_cost(inst, rp.with_flat(z)) <= W + 1e-12
    # so every gradient entry is nonpositive
    w_x, w_y = cost_gradient(inst, rp)
    assert np.all(w_x <= 1e-15) and np.all(w_y <= 1e-15)
