"""Shared builders for small random instances and the acceptance report."""
import numpy as np
import pytest

from coopcache import Capacities, Catalog, ProblemInstance, RelaxedPlacement, Topology

RATES = (10.0, 100.0, 50.0)   # cloud-MBS, MBS-RSU, MBS-MBS in Mb/s


def make_topology(cluster_sizes, rates=RATES):
    cluster_of = np.repeat(np.arange(len(cluster_sizes)), cluster_sizes)
    return Topology(len(cluster_sizes), cluster_of, *rates)


def random_instance(rng, R=None, M=None, F=None, vehicles=5, unit_sizes=False, max_rsu=4, max_mbs=2, max_files=6):
    """Random topology, sizes, capacities, residence and demand."""
    M = M if M is not None else int(rng.integers(1, max_mbs + 1))
    R = R if R is not None else int(rng.integers(1, max_rsu + 1))
    F = F if F is not None else int(rng.integers(1, max_files + 1))
    cluster_of = np.sort(rng.integers(0, M, R))
    topo = Topology(M, cluster_of, *RATES)
    sizes = np.ones(F) if unit_sizes else rng.uniform(0.5, 2.0, F)
    caps = Capacities(rng.uniform(0.0, sizes.sum(), R), rng.uniform(0.0, sizes.sum(), M))
    tau = rng.uniform(0.0, 5.0, (vehicles, R))
    pi = rng.uniform(0.0, 1.0, (vehicles, F))
    return ProblemInstance(topo, Catalog(sizes), caps, tau, pi)


def random_point(rng, inst, scale=2.0):
    R, M, F = inst.shape
    return RelaxedPlacement(rng.normal(0.0, scale, (R, F)), rng.normal(0.0, scale, (M, F)))


def tiny_instance(t):
    """The M=1, R=2, F=4 unit-size instance family with caps 1 (RSU) / 2 (MBS)."""
    rng = np.random.default_rng(t)
    topo = make_topology([2])
    return ProblemInstance(topo, Catalog.uniform(4), Capacities.uniform(2, 1, 1.0, 2.0),
                           rng.uniform(0.0, 5.0, (6, 2)), rng.uniform(0.0, 1.0, (6, 4)))


def central_diff(fun, z, h=1e-5):
    g = np.zeros_like(z)
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (fun(z + e) - fun(z - e)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance outcomes, printed again after the run so they survive capture
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
