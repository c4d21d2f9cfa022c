"""Synthetic scenarios and the episodic prediction -> caching -> transmission
pipeline.

A scenario holds a few history days of RSU attachments and file requests
for every vehicle, plus the current day split into episodes of ``T``
slots. Before episode ``e`` the predictors only see data up to the end of
episode ``e - 1``; the oracle policy alone looks at episode ``e`` itself.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import (
    ENUMERATION_LIMIT,
    LruCache,
    greedy_local_placement,
    oracle_cooperative_placement,
    random_placement,
)
from .delay import Placement, SourceTier, delay_matrix, tier_unit_delays
from .demand import (
    HflSchedule,
    SasrecParams,
    VehicleClient,
    frequency_demand,
    hfl_round,
    oracle_demand,
    predict_demand,
)
from .mobility import (
    MobilityTrace,
    build_residence_matrix,
    oracle_residence,
    predict_residence,
    train_ppm,
    uniform_residence,
)
from .objective import ProblemInstance
from .solver import SolverConfig, solve
from .topology import Capacities, Catalog, Topology

log = logging.getLogger(__name__)

__all__ = [
    "POLICIES",
    "ScenarioParams",
    "PredictorSettings",
    "Scenario",
    "EpisodeResult",
    "PolicyMetrics",
    "PipelineReport",
    "generate_scenario",
    "grid_neighbours",
    "LruState",
    "run_episode",
    "predict_episode",
    "oracle_instance",
    "plan_placements",
    "pipeline_makespan",
    "run_pipeline",
    "sweep",
    "format_sweep_csv",
    "SWEEP_COLUMNS",
]

POLICIES = ("lru", "random", "noncooperative", "cooperative", "oracle")
HIT_TIERS = (SourceTier.LocalRSU, SourceTier.LocalMBS, SourceTier.ClusterRSU)


@dataclass(frozen=True)
class ScenarioParams:
    """Network plus the knobs of the synthetic mobility and request model.

    Vehicles walk on a grid of RSUs (``grid_cols`` columns, 0 = largest
    cluster size). Each vehicle has its own preferred next RSU for every
    (previous, current) pair, which makes the walk second order. Each slot
    it stays with ``stay_prob``; otherwise it follows its preference with
    probability ``habit`` or moves to a uniformly random neighbour. Every
    attached slot issues ``requests_per_slot`` requests drawn from a
    Zipf(``zipf_alpha``) law over the vehicle's own preference order, a
    noisy copy (rank noise ``preference_noise``) of one global ranking.
    """

    topology: Topology
    catalog: Catalog
    capacities: Capacities
    vehicles: int = 40
    episodes: int = 5
    slots_per_episode: int = 12
    warmup_slots: int = 12
    history_days: int = 5
    stay_prob: float = 0.2
    habit: float = 0.9
    absent_prob: float = 0.0
    requests_per_slot: int = 1
    zipf_alpha: float = 0.8
    preference_noise: float = 5.0
    grid_cols: int = 0

    def __post_init__(self):
        checks = {
            "vehicles": self.vehicles >= 1,
            "episodes": self.episodes >= 1,
            "slots_per_episode": self.slots_per_episode >= 1,
            "warmup_slots": self.warmup_slots >= 1,
            "history_days": self.history_days >= 1,
            "stay_prob": 0.0 <= self.stay_prob <= 1.0,
            "habit": 0.0 <= self.habit <= 1.0,
            "absent_prob": 0.0 <= self.absent_prob < 1.0,
            "requests_per_slot": self.requests_per_slot >= 0,
            "zipf_alpha": self.zipf_alpha >= 0.0,
            "preference_noise": self.preference_noise >= 0.0,
            "grid_cols": self.grid_cols >= 0,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid scenario parameter(s): {', '.join(bad)}")

    @property
    def slots_per_day(self) -> int:
        return self.warmup_slots + self.episodes * self.slots_per_episode


@dataclass(frozen=True)
class PredictorSettings:
    """Prediction and caching settings shared by all policies."""

    ppm_order: int = 2
    mobility_model: str = "ppm"          # ppm | uniform
    demand_model: str = "sasrec"         # sasrec | frequency
    dim: int = 32
    history_len: int = 20
    targets: int = 5
    negatives: int = 100
    init_scale: float = 0.1
    schedule: HflSchedule = HflSchedule()
    pretrain_rounds: int = 100
    episode_rounds: int = 10
    solver: SolverConfig = SolverConfig()
    warmup_fraction: float = 0.2

    def __post_init__(self):
        if self.mobility_model not in ("ppm", "uniform"):
            raise ValueError(f"unknown mobility model {self.mobility_model!r}")
        if self.demand_model not in ("sasrec", "frequency"):
            raise ValueError(f"unknown demand model {self.demand_model!r}")
        if not 0 < self.targets < self.history_len:
            raise ValueError("need 0 < targets < history_len")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class Scenario:
    """Generated traces. RSU ids in traces are 1-based (0 = absent) and
    file ids 1-based (0 = padding)."""

    params: ScenarioParams
    seed: int
    mobility_history: tuple        # MobilityTrace per vehicle
    today: np.ndarray              # V x N attachments of the current day
    request_history: tuple         # per vehicle, file ids over the history days
    requests_today: tuple          # per vehicle, (slot, file_id) pairs

    @property
    def topology(self):
        return self.params.topology

    @property
    def catalog(self):
        return self.params.catalog

    @property
    def capacities(self):
        return self.params.capacities

    def episode_start(self, e: int) -> int:
        return self.params.warmup_slots + e * self.params.slots_per_episode

    def episode_requests(self, e: int):
        """Requests of episode ``e`` as (slot, vehicle, file_id), ordered by
        slot then vehicle."""
        lo = self.episode_start(e)
        hi = lo + self.params.slots_per_episode
        out = [(s, v, f) for v, reqs in enumerate(self.requests_today) for s, f in reqs if lo <= s < hi]
        out.sort(key=lambda t: (t[0], t[1]))
        return out

    def with_capacities(self, capacities: Capacities) -> "Scenario":
        return replace(self, params=replace(self.params, capacities=capacities))


def grid_neighbours(rsu_count: int, cols: int) -> list:
    """4-neighbourhood of RSUs laid out row by row in ``cols`` columns."""
    out = []
    for r in range(rsu_count):
        i, j = divmod(r, cols)
        nb = []
        for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            ii, jj = i + di, j + dj
            if 0 <= jj < cols and ii >= 0 and ii * cols + jj < rsu_count:
                nb.append(ii * cols + jj)
        out.append(nb)
    return out


def _habits(rng, neighbours):
    """Preferred next RSU for every (previous, current) pair of one vehicle;
    previous is None at the start of a day."""
    prefs = {}
    for cur, nb in enumerate(neighbours):
        if not nb:
            continue
        for prev in [None, *nb]:
            options = [q for q in nb if q != prev] or nb
            prefs[(prev, cur)] = options[rng.integers(len(options))]
    return prefs


def _walk(rng, home, slots, neighbours, habits, p: ScenarioParams):
    seq = np.zeros(slots, dtype=np.int64)
    pos, prev = home, None
    for t in range(slots):
        if rng.random() >= p.stay_prob and neighbours[pos]:
            nb = neighbours[pos]
            if rng.random() < p.habit:
                nxt = habits[(prev, pos)]
            else:
                nxt = nb[rng.integers(len(nb))]
            prev, pos = pos, nxt
        seq[t] = 0 if (p.absent_prob and rng.random() < p.absent_prob) else pos + 1
    return seq


def _zipf_weights(F, alpha):
    w = np.arange(1, F + 1, dtype=np.float64) ** -alpha
    return w / w.sum()


def generate_scenario(params: ScenarioParams, seed: int) -> Scenario:
    """Deterministic synthetic scenario for ``seed``."""
    ss = np.random.SeedSequence(seed)
    mob_rng, req_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    R, F = params.topology.rsu_count, params.catalog.file_count
    V, N = params.vehicles, params.slots_per_day
    cols = params.grid_cols or int(params.topology.cluster_sizes().max())
    neighbours = grid_neighbours(R, max(cols, 1))

    homes = mob_rng.integers(0, R, V)
    history, today = [], np.zeros((V, N), dtype=np.int64)
    for v in range(V):
        habits = _habits(mob_rng, neighbours)
        days = [_walk(mob_rng, homes[v], N, neighbours, habits, params) for _ in range(params.history_days + 1)]
        history.append(MobilityTrace(v, np.array(days[:-1])))
        today[v] = days[-1]

    ranking = req_rng.permutation(F)              # global popularity order
    weights = _zipf_weights(F, params.zipf_alpha)
    req_hist, req_today = [], []
    for v in range(V):
        noisy = np.arange(F) + params.preference_noise * req_rng.standard_normal(F)
        prefs = ranking[np.argsort(noisy, kind="stable")] + 1
        n_hist = int(np.count_nonzero(history[v].days)) * params.requests_per_slot
        req_hist.append(tuple(prefs[req_rng.choice(F, size=n_hist, p=weights)].tolist()))
        attached = np.repeat(np.flatnonzero(today[v]), params.requests_per_slot)
        files = prefs[req_rng.choice(F, size=attached.size, p=weights)]
        req_today.append(tuple(zip(attached.tolist(), files.tolist())))
    today.setflags(write=False)
    return Scenario(params, seed, tuple(history), today, tuple(req_hist), tuple(req_today))


# -- transmission phase ---------------------------------------------------

@dataclass
class EpisodeResult:
    """Served requests of one episode for one policy.

    ``records`` columns: vehicle, file_id, slot, tier, delay (s), measured.
    """

    records: np.ndarray
    hits: int
    misses: int
    stamps: dict = field(default_factory=dict)

    @property
    def measured(self):
        return self.records[self.records["measured"]]


_RECORD = np.dtype([("vehicle", np.int64), ("file", np.int64), ("slot", np.int64),
                    ("tier", np.int8), ("delay", np.float64), ("measured", bool)])


class LruState:
    """Online LRU caches at every RSU and MBS, kept across episodes."""

    def __init__(self, topology: Topology, capacities: Capacities):
        self.topology = topology
        self.rsu = [LruCache(c) for c in capacities.rsu]
        self.mbs = [LruCache(c) for c in capacities.mbs]

    def resolve(self, r, f) -> SourceTier:
        m = int(self.topology.cluster_of[r])
        if f in self.rsu[r]:
            return SourceTier.LocalRSU
        if f in self.mbs[m]:
            return SourceTier.LocalMBS
        if any(f in self.rsu[q] for q in self.topology.members[m]):
            return SourceTier.ClusterRSU
        if any(f in c for c in self.mbs):
            return SourceTier.OtherMBS
        if any(f in c for c in self.rsu):
            return SourceTier.OtherRSU
        return SourceTier.Cloud

    def serve(self, r, f, size) -> SourceTier:
        tier = self.resolve(r, f)
        if size <= self.rsu[r].capacity:
            self.rsu[r].access(f, size)
        m = int(self.topology.cluster_of[r])
        # anything not held locally passes through the cluster's MBS
        if tier != SourceTier.LocalRSU and size <= self.mbs[m].capacity:
            self.mbs[m].access(f, size)
        return tier


def run_episode(scenario: Scenario, placement, episode: int, warmup_fraction: float = 0.2) -> EpisodeResult:
    """Serve the requests of ``episode``.

    ``placement`` is a :class:`Placement` fixed for the episode or an
    :class:`LruState` updated online. The first ``warmup_fraction`` of the
    requests are served but not measured. Tiers 0-2 count as hits.
    """
    topo, cat = scenario.topology, scenario.catalog
    reqs = scenario.episode_requests(episode)
    records = np.zeros(len(reqs), dtype=_RECORD)
    skip = int(np.floor(warmup_fraction * len(reqs)))
    unit = tier_unit_delays(topo)
    static = None
    if isinstance(placement, Placement):
        static = delay_matrix(placement, topo, cat)[0]
    elif not isinstance(placement, LruState):
        raise TypeError("placement must be a Placement or an LruState")
    for k, (slot, v, f) in enumerate(reqs):
        if not 0 <= v < len(scenario.requests_today):
            raise ValueError(f"request from unknown vehicle {v}")
        if not 1 <= f <= cat.file_count:
            raise ValueError(f"request for unknown file {f}")
        r = int(scenario.today[v, slot]) - 1
        if r < 0:
            raise ValueError(f"vehicle {v} requests while detached at slot {slot}")
        if static is not None:
            tier = int(static[r, f - 1])
        else:
            tier = int(placement.serve(r, f - 1, cat.sizes[f - 1]))
        records[k] = (v, f, slot, tier, unit[tier] * cat.sizes[f - 1], k >= skip)
    meas = records[records["measured"]]
    hits = int(np.isin(meas["tier"], HIT_TIERS).sum())
    return EpisodeResult(records, hits, int(meas.size - hits))


# -- prediction and caching phases ----------------------------------------

class _Predictor:
    """Per-scenario predictor state carried from one episode to the next."""

    def __init__(self, scenario: Scenario, settings: PredictorSettings):
        self.scenario = scenario
        self.settings = settings
        p = scenario.params
        R, F = p.topology.rsu_count, p.catalog.file_count
        self.models = [train_ppm([tr], settings.ppm_order, R, p.slots_per_episode) for tr in scenario.mobility_history]
        self.rng = np.random.default_rng(np.random.SeedSequence([scenario.seed, 1]))
        self.params = None
        self.kappa = 0
        if settings.demand_model == "sasrec":
            n = settings.history_len - settings.targets
            self.params = [SasrecParams.init(F, n, settings.dim, self.rng, settings.init_scale).to_dict()]
            self.params *= p.vehicles
            self._train(0, settings.pretrain_rounds)

    def requests_before(self, v, slot):
        today = [f for s, f in self.scenario.requests_today[v] if s < slot]
        return list(self.scenario.request_history[v]) + today

    def attachment(self, v, slot):
        seen = self.scenario.today[v, :slot]
        seen = seen[seen > 0]
        if seen.size:
            return int(seen[-1]) - 1
        days = self.scenario.mobility_history[v].days
        nz = days[days > 0]
        return int(nz[-1]) - 1 if nz.size else 0

    def _train(self, slot, rounds):
        if rounds <= 0:
            return
        s, sc = self.settings, self.scenario
        n = s.history_len - s.targets
        F = sc.catalog.file_count
        clients = [
            VehicleClient.sasrec(v, SasrecParams.from_dict(self.params[v]), self.requests_before(v, slot),
                                 s.targets, s.negatives, self.rng)
            for v in range(sc.params.vehicles)
        ]
        rsu_of = {v: self.attachment(v, slot) for v in range(sc.params.vehicles)}
        for _ in range(rounds):
            self.kappa += 1
            hfl_round(clients, rsu_of, sc.topology.cluster_of, s.schedule, self.kappa)
        self.params = [c.params for c in clients]
        assert all(p["M"].shape == (s.dim, F + 1) and p["P"].shape == (s.dim, n) for p in self.params)

    def predict(self, e):
        sc, s = self.scenario, self.settings
        slot = sc.episode_start(e)
        T, R, F = sc.params.slots_per_episode, sc.topology.rsu_count, sc.catalog.file_count
        if s.mobility_model == "ppm":
            tau = build_residence_matrix([predict_residence(m, sc.today[v, :slot], T) for v, m in enumerate(self.models)], R)
        else:
            tau = build_residence_matrix([uniform_residence(R, T)] * sc.params.vehicles, R)
        if s.demand_model == "sasrec":
            if e > 0:
                self._train(slot, s.episode_rounds)
            pi = np.array([predict_demand(SasrecParams.from_dict(self.params[v]), self.requests_before(v, slot))
                           for v in range(sc.params.vehicles)])
        else:
            pi = frequency_demand([self.requests_before(v, slot) for v in range(sc.params.vehicles)], F)
        return ProblemInstance(sc.topology, sc.catalog, sc.capacities, tau, pi)


def predict_episode(scenario: Scenario, settings: PredictorSettings, episode: int) -> ProblemInstance:
    """Predicted instance for ``episode`` using data up to its start."""
    pred = _Predictor(scenario, settings)
    for e in range(episode):
        pred.predict(e)
    return pred.predict(episode)


def oracle_instance(scenario: Scenario, episode: int) -> ProblemInstance:
    """Instance built from the true attachments and requests of ``episode``."""
    lo = scenario.episode_start(episode)
    T = scenario.params.slots_per_episode
    R, F = scenario.topology.rsu_count, scenario.catalog.file_count
    tau = build_residence_matrix([oracle_residence(row[lo:lo + T], T, R) for row in scenario.today], R)
    future = [[(s - lo, f) for s, f in reqs if lo <= s < lo + T] for reqs in scenario.requests_today]
    pi = oracle_demand(future, F, horizon=T)
    return ProblemInstance(scenario.topology, scenario.catalog, scenario.capacities, tau, pi)


def plan_placements(scenario, episode, policies, predicted: ProblemInstance, solver: SolverConfig):
    """Placement and solver iterations per proactive policy."""
    out = {}
    for policy in policies:
        if policy == "cooperative":
            rep = solve(predicted, solver)
            out[policy] = (rep.placement, rep.iterations)
        elif policy == "noncooperative":
            out[policy] = (greedy_local_placement(predicted), 0)
        elif policy == "random":
            seed = np.random.SeedSequence([scenario.seed, 2, episode])
            out[policy] = (random_placement(scenario.catalog, scenario.capacities, seed), 0)
        elif policy == "oracle":
            inst = oracle_instance(scenario, episode)
            R, M, F = inst.shape
            if (R + M) * F <= ENUMERATION_LIMIT:
                out[policy] = (oracle_cooperative_placement(inst, solver), 0)
            else:
                rep = solve(inst, solver)
                out[policy] = (rep.placement, rep.iterations)
        elif policy != "lru":
            raise ValueError(f"unknown policy {policy!r}")
    return out


# -- pipeline -------------------------------------------------------------

def pipeline_makespan(durations):
    """Serial and pipelined makespans from per-episode (P, C, X) durations.

    Prediction of episode ``e + 1`` starts once the caching phase of ``e``
    is done, so it overlaps the transmission phase of ``e``; transmissions
    run one after another.
    """
    serial = float(sum(p + c + x for p, c, x in durations))
    end_p = end_c = end_x = 0.0
    for p, c, x in durations:
        start_p = max(end_p, end_c)
        end_p = start_p + p
        end_c = end_p + c
        end_x = max(end_c, end_x) + x
    return serial, float(end_x)


@dataclass
class PolicyMetrics:
    policy: str
    episodes: list = field(default_factory=list)
    solver_iters: int = 0

    @property
    def delays(self) -> np.ndarray:
        parts = [e.measured["delay"] for e in self.episodes]
        return np.concatenate(parts) if parts else np.zeros(0)

    @property
    def requests(self) -> int:
        return int(sum(e.hits + e.misses for e in self.episodes))

    @property
    def no_requests(self) -> bool:
        return self.requests == 0

    @property
    def hits(self) -> int:
        return int(sum(e.hits for e in self.episodes))

    @property
    def hit_ratio(self):
        return None if self.no_requests else self.hits / self.requests

    @property
    def avg_delay(self):
        return None if self.no_requests else float(np.sum(self.delays) / self.requests)


@dataclass
class PipelineReport:
    seed: int
    metrics: dict
    durations: list
    serial_makespan: float
    pipelined_makespan: float

    @property
    def no_requests(self) -> bool:
        return all(m.no_requests for m in self.metrics.values())


def run_pipeline(scenario: Scenario, policies=POLICIES, settings: PredictorSettings = PredictorSettings()) -> PipelineReport:
    """Run every episode for every policy and pool the metrics."""
    policies = list(policies)
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown policy {p!r}; choose from {', '.join(POLICIES)}")
    metrics = {p: PolicyMetrics(p) for p in policies}
    lru = LruState(scenario.topology, scenario.capacities) if "lru" in policies else None
    durations = []
    t0 = time.perf_counter()
    predictor = _Predictor(scenario, settings)
    pre = time.perf_counter() - t0
    for e in range(scenario.params.episodes):
        t0 = time.perf_counter()
        inst = predictor.predict(e)
        t1 = time.perf_counter()
        plans = plan_placements(scenario, e, policies, inst, settings.solver)
        t2 = time.perf_counter()
        results = []
        for p in policies:
            placement = lru if p == "lru" else plans[p][0]
            results.append(run_episode(scenario, placement, e, settings.warmup_fraction))
            metrics[p].episodes.append(results[-1])
            if p in plans:
                metrics[p].solver_iters += plans[p][1]
        t3 = time.perf_counter()
        durations.append((t1 - t0 + (pre if e == 0 else 0.0), t2 - t1, t3 - t2))
        for res in results:
            res.stamps = dict(zip(("episode", "predict_s", "cache_s", "transmit_s"), (e, *durations[-1])))
    serial, pipelined = pipeline_makespan(durations)
    return PipelineReport(scenario.seed, metrics, durations, serial, pipelined)


# -- sweeps and CSV output ------------------------------------------------

SWEEP_COLUMNS = ["policy", "axis_value", "hit_ratio", "avg_delay_s", "episodes", "requests", "solver_iters", "seed"]


def _fmt(v):
    if v is None:
        return ""   # undefined metric, e.g. no requests
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6g}"


def report_rows(report: PipelineReport, axis_value=""):
    rows = []
    for p, m in report.metrics.items():
        rows.append([p, axis_value, m.hit_ratio, m.avg_delay, len(m.episodes), m.requests, m.solver_iters, report.seed])
    return rows


def format_sweep_csv(rows) -> str:
    """CSV text with 6 significant digits for reals; undefined metrics are
    left empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([row[0], row[1] if isinstance(row[1], str) else _fmt(row[1])] + [_fmt(v) for v in row[2:]])
    return buf.getvalue()


def _with_axis(scenario, axis, value):
    caps = scenario.capacities
    if axis == "rsu_cap":
        caps = Capacities(np.full(caps.rsu.size, float(value)), caps.mbs)
    elif axis == "mbs_cap":
        caps = Capacities(caps.rsu, np.full(caps.mbs.size, float(value)))
    else:
        raise ValueError(f"unknown sweep axis {axis!r}; use rsu_cap or mbs_cap")
    return scenario.with_capacities(caps)


def _sweep_point(args):
    scenario, axis, value, policies, settings = args
    return run_pipeline(_with_axis(scenario, axis, value), policies, settings)


def sweep(scenario: Scenario, axis: str, values, policies=POLICIES,
          settings: PredictorSettings = PredictorSettings(), threads: int = 1):
    """Run the pipeline once per axis value on the same scenario.

    Returns ``(rows, reports)``. Distinct values run in separate worker
    processes when ``threads > 1``; results do not depend on ``threads``.
    """
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    for v in values:
        _with_axis(scenario, axis, v)   # validate before starting workers
    jobs = [(scenario, axis, v, tuple(policies), settings) for v in values]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            reports = list(pool.map(_sweep_point, jobs))
    else:
        reports = [_sweep_point(j) for j in jobs]
    rows = [row for v, rep in zip(values, reports) for row in report_rows(rep, v)]
    return rows, reports
