"""
Where a request is served from
==============================

Two clusters: MBS 1 serves RSUs 1 and 2, MBS 2 serves RSU 3. A vehicle at
RSU 1 asks for one 1 Mb file while copies sit at different nodes, and the
nearest copy in the retrieval order decides the delay.
"""

import numpy as np

from coopcache import Capacities, Catalog, Placement, ProblemInstance, RelaxedPlacement, Topology
from coopcache.delay import resolve_source, retrieval_delay, tier_unit_delays
from coopcache.objective import cost_gradient, expected_cost

# rates in Mb/s: cloud to MBS, MBS to RSU, MBS to MBS
topo = Topology(2, np.array([0, 0, 1]), 10.0, 100.0, 50.0)
cat = Catalog.uniform(1)
print("seconds per Mb by tier:", np.round(tier_unit_delays(topo), 3))

# move a single copy around and watch the serving tier change
cases = {
    "copy at RSU 1 (local)": ([(0, 0)], []),
    "copy at MBS 1 (local MBS)": ([], [(0, 0)]),
    "copy at RSU 2 (same cluster)": ([(1, 0)], []),
    "copy at MBS 2 (other cluster)": ([], [(1, 0)]),
    "copy at RSU 3 (other cluster)": ([(2, 0)], []),
    "no copy (cloud)": ([], []),
}
for name, (xs, ys) in cases.items():
    x, y = np.zeros((3, 1), dtype=np.int8), np.zeros((2, 1), dtype=np.int8)
    for r, f in xs:
        x[r, f] = 1
    for m, f in ys:
        y[m, f] = 1
    p = Placement(x, y)
    tier = resolve_source(p, 0, 0, topo)
    print(f"{name:30s} -> {tier.name:10s} {retrieval_delay(p, 0, 0, topo, cat):.3f} s")

# the relaxed cost interpolates between these corners; caching more never hurts
inst = ProblemInstance(topo, cat, Capacities.uniform(3, 2, 1.0, 1.0), np.array([[4.0, 0.0, 0.0]]), np.array([[0.5]]))
for logit in (-6.0, 0.0, 6.0):
    rp = RelaxedPlacement.full(3, 2, 1, logit)
    w_x, w_y = cost_gradient(inst, rp)
    print(f"all logits {logit:+.0f}: W = {expected_cost(inst, rp):.4f}, dW/dx_1 = {w_x[0, 0]:+.4f}")
