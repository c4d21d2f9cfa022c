import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from coopcache import Capacities, Catalog, Placement
from coopcache.baselines import greedy_local_placement
from coopcache.demand import HflSchedule
from coopcache.mobility import MobilityTrace
from coopcache.objective import binary_cost
from coopcache.sim import (
    SWEEP_COLUMNS,
    LruState,
    PredictorSettings,
    Scenario,
    ScenarioParams,
    format_sweep_csv,
    generate_scenario,
    oracle_instance,
    pipeline_makespan,
    run_episode,
    run_pipeline,
    sweep,
)
from coopcache.solver import SolverConfig, solve

from conftest import make_topology

# small scenarios leave some RSUs without vehicles; that warning is tested elsewhere
pytestmark = pytest.mark.filterwarnings("ignore:RSU .* no participating:RuntimeWarning")

FAST = PredictorSettings(dim=4, history_len=6, targets=2, negatives=5, pretrain_rounds=2, episode_rounds=1,
                         schedule=HflSchedule(2, 2), solver=SolverConfig(max_iters=300))


def _params(**kw):
    base = dict(topology=make_topology([2, 2]), catalog=Catalog.uniform(12),
                capacities=Capacities.uniform(4, 2, 2.0, 3.0), vehicles=6, episodes=2,
                slots_per_episode=4, warmup_slots=4, history_days=2)
    base.update(kw)
    return ScenarioParams(**base)


def _same(a: Scenario, b: Scenario):
    return (np.array_equal(a.today, b.today) and a.request_history == b.request_history
            and a.requests_today == b.requests_today
            and all(np.array_equal(x.days, y.days) for x, y in zip(a.mobility_history, b.mobility_history)))


# -- scenario generation -----------------------------------------------------

def test_scenario_deterministic():
    p = _params()
    assert _same(generate_scenario(p, 5), generate_scenario(p, 5))
    assert not _same(generate_scenario(p, 5), generate_scenario(p, 6))


def test_scenario_shapes_and_ids():
    p = _params(absent_prob=0.1)
    sc = generate_scenario(p, 0)
    assert sc.today.shape == (6, p.slots_per_day)
    assert sc.today.max() <= 4 and sc.today.min() >= 0
    assert all(tr.days.shape == (2, p.slots_per_day) for tr in sc.mobility_history)
    for v, reqs in enumerate(sc.requests_today):
        assert all(sc.today[v, s] > 0 and 1 <= f <= 12 for s, f in reqs)
    with pytest.raises(ValueError, match="read-only"):
        sc.today[0, 0] = 1


def test_uniform_requests_when_alpha_zero():
    p = _params(catalog=Catalog.uniform(10), vehicles=50, zipf_alpha=0.0, history_days=6,
                warmup_slots=8, slots_per_episode=8, requests_per_slot=2)
    sc = generate_scenario(p, 1)
    draws = np.concatenate([np.array(h) for h in sc.request_history])
    assert draws.size >= 10_000
    counts = np.bincount(draws, minlength=11)[1:]
    assert stats.chisquare(counts).pvalue > 1e-3


def test_single_rsu_attachments():
    sc = generate_scenario(_params(topology=make_topology([1]), capacities=Capacities.uniform(1, 1, 1.0, 1.0)), 0)
    assert np.all(sc.today == 1)
    assert all(np.all(tr.days == 1) for tr in sc.mobility_history)


def test_invalid_params():
    with pytest.raises(ValueError, match="habit"):
        _params(habit=1.5)
    with pytest.raises(ValueError, match="vehicles"):
        _params(vehicles=0)


# -- transmission phase ------------------------------------------------------

def _manual():
    """Four vehicles at RSU 1 (cluster 0 holds RSUs 1, 2; cluster 1 holds RSU 3),
    each requesting one file in the single measured slot."""
    topo = make_topology([2, 1])
    params = ScenarioParams(topo, Catalog.uniform(4), Capacities.uniform(3, 2, 1.0, 1.0),
                            vehicles=4, episodes=1, slots_per_episode=1, warmup_slots=1, history_days=1)
    today = np.ones((4, 2), dtype=np.int64)
    hist = tuple(MobilityTrace(v, np.ones((1, 2), dtype=np.int64)) for v in range(4))
    reqs = tuple(((1, v + 1),) for v in range(4))
    return Scenario(params, 0, hist, today, ((),) * 4, reqs)


def test_hit_accounting():
    sc = _manual()
    x = np.zeros((3, 4), dtype=np.int8)
    y = np.zeros((2, 4), dtype=np.int8)
    x[0, 0] = 1     # local RSU
    y[0, 1] = 1     # local MBS
    x[1, 2] = 1     # neighbour RSU in the cluster
    x[2, 3] = 1     # RSU of the other cluster: a miss
    res = run_episode(sc, Placement(x, y), 0, warmup_fraction=0.0)
    assert (res.hits, res.misses) == (3, 1)
    assert res.records["tier"].tolist() == [0, 1, 2, 4]
    assert res.records["delay"] == pytest.approx([0.0, 0.01, 0.02, 0.04])


def test_everything_cached_locally():
    sc = generate_scenario(_params(capacities=Capacities.uniform(4, 2, 12.0, 0.0)), 2)
    full = Placement(np.ones((4, 12), dtype=np.int8), np.zeros((2, 12), dtype=np.int8))
    res = run_episode(sc, full, 1)
    assert res.misses == 0 and res.hits > 0
    assert np.all(res.records["delay"] == 0.0)


def test_nothing_cached():
    cat = Catalog(np.linspace(1.0, 3.0, 12))
    sc = generate_scenario(_params(catalog=cat), 2)
    res = run_episode(sc, Placement.empty(4, 2, 12), 0)
    assert res.hits == 0
    rec = res.records
    assert rec["delay"] == pytest.approx(0.11 * cat.sizes[rec["file"] - 1], rel=1e-14)


def test_warmup_excludes_first_requests():
    sc = _manual()
    res = run_episode(sc, Placement.empty(3, 2, 4), 0, warmup_fraction=0.5)
    assert res.records["measured"].tolist() == [False, False, True, True]
    assert res.hits + res.misses == 2


def test_unknown_file_or_vehicle():
    sc = _manual()
    bad = Scenario(sc.params, 0, sc.mobility_history, sc.today, sc.request_history,
                   (((1, 9),),) + sc.requests_today[1:])
    with pytest.raises(ValueError, match="unknown file"):
        run_episode(bad, Placement.empty(3, 2, 4), 0)
    with pytest.raises(TypeError):
        run_episode(sc, "lru", 0)


def test_lru_state_serves_online():
    sc = _manual()
    lru = LruState(sc.topology, sc.capacities)
    assert lru.serve(0, 0, 1.0) == 5
    assert lru.resolve(0, 0) == 0
    assert lru.resolve(1, 0) == 1       # through the shared MBS
    assert lru.resolve(2, 0) == 3       # the MBS copy outranks the RSU copy


# -- pipeline ----------------------------------------------------------------

def test_single_episode_makespans_equal():
    assert pipeline_makespan([(1.0, 2.0, 3.0)]) == (6.0, 6.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0), st.integers(1, 8))
def test_constant_phase_makespan(p, c, x, E):
    serial, piped = pipeline_makespan([(p, c, x)] * E)
    assert piped == pytest.approx(p + c + x + (E - 1) * max(p + c, x), abs=1e-9)
    assert serial == pytest.approx(E * (p + c + x), abs=1e-9)
    assert piped <= serial + 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(*[st.floats(0.0, 5.0)] * 3), min_size=1, max_size=8))
def test_pipelining_never_slower(durations):
    serial, piped = pipeline_makespan(durations)
    assert piped <= serial + 1e-9
    assert piped >= max(sum(d[2] for d in durations), max(sum(d) for d in durations)) - 1e-9


def test_run_pipeline_small():
    rep = run_pipeline(generate_scenario(_params(), 3), settings=FAST)
    assert set(rep.metrics) == {"lru", "random", "noncooperative", "cooperative", "oracle"}
    assert len(rep.durations) == 2 and rep.pipelined_makespan <= rep.serial_makespan + 1e-12
    for m in rep.metrics.values():
        assert len(m.episodes) == 2
        assert m.avg_delay == float(np.sum(m.delays) / m.requests)
        hits = sum(int(np.isin(e.measured["tier"], [0, 1, 2]).sum()) for e in m.episodes)
        assert m.hits == hits and 0.0 <= m.hit_ratio <= 1.0
        assert [e.stamps["episode"] for e in m.episodes] == [0, 1]
    one = run_pipeline(generate_scenario(_params(episodes=1), 3), ["random"], FAST)
    assert one.pipelined_makespan == one.serial_makespan


def test_no_requests_flag():
    rep = run_pipeline(generate_scenario(_params(requests_per_slot=0), 0), ["random", "lru"], FAST)
    assert rep.no_requests
    assert all(m.hit_ratio is None and m.avg_delay is None for m in rep.metrics.values())
    rows = list(csv.reader(io.StringIO(format_sweep_csv([["random", "none", None, None, 2, 0, 0, 0]]))))
    assert rows[1][2:4] == ["", ""]


def test_unknown_policy():
    with pytest.raises(ValueError, match="unknown policy"):
        run_pipeline(generate_scenario(_params(), 0), ["lfu"], FAST)


# -- sweeps ------------------------------------------------------------------

def test_sweep_rows_and_format():
    sc = generate_scenario(_params(), 4)
    rows, reports = sweep(sc, "rsu_cap", [1, 2, 3], ["random", "noncooperative"], FAST)
    text = format_sweep_csv(rows)
    table = list(csv.reader(io.StringIO(text)))
    assert table[0] == SWEEP_COLUMNS
    assert len(table) == 1 + 3 * 2
    assert [r[1] for r in table[1:]] == ["1", "1", "2", "2", "3", "3"]
    assert all(r[7] == "4" for r in table[1:])
    again, _ = sweep(sc, "rsu_cap", [1, 2, 3], ["random", "noncooperative"], FAST)
    assert format_sweep_csv(again) == text
    with pytest.raises(ValueError, match="axis"):
        sweep(sc, "speed", [1], ["random"], FAST)
    with pytest.raises(ValueError):
        sweep(sc, "rsu_cap", [], ["random"], FAST)


def test_sweep_threads_do_not_change_results():
    sc = generate_scenario(_params(), 4)
    a, _ = sweep(sc, "mbs_cap", [1, 4], ["random", "cooperative"], FAST, threads=1)
    b, _ = sweep(sc, "mbs_cap", [1, 4], ["random", "cooperative"], FAST, threads=2)
    assert format_sweep_csv(a) == format_sweep_csv(b)


def test_full_catalog_capacity_hits_everything():
    sc = generate_scenario(_params(), 6)
    rows, _ = sweep(sc, "rsu_cap", [12], ["random", "noncooperative", "cooperative", "oracle"], FAST)
    assert all(r[2] == 1.0 for r in rows)


def test_oracle_cooperative_beats_noncooperative_on_oracle_matrices():
    for seed in range(4):
        sc = generate_scenario(_params(catalog=Catalog.uniform(20), vehicles=10), seed)
        for e in range(2):
            inst = oracle_instance(sc, e)
            coop = binary_cost(inst, solve(inst, SolverConfig(seed=seed)).placement)
            assert coop <= binary_cost(inst, greedy_local_placement(inst)) + 1e-12
