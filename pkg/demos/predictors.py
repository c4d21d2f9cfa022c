"""
Predicting where vehicles go and what they ask for
==================================================

Residence times come from a prediction-by-partial-matching model of each
vehicle's past days. Demand comes from a small self-attentive recommender
trained on each vehicle, with RSU and MBS averaging of the parameters.
"""

import warnings

import numpy as np

from coopcache.config import demo_config
from coopcache.demand import HflSchedule, SasrecParams, VehicleClient, hfl_round, predict_demand
from coopcache.mobility import oracle_residence, predict_residence, train_ppm, uniform_residence
from coopcache.sim import generate_scenario

params = demo_config().scenario_params()
sc = generate_scenario(params, seed=1)
R, T = params.topology.rsu_count, params.slots_per_episode

# mobility: PPM against a flat guess, over every vehicle and episode
err_ppm, err_uniform = [], []
for v in range(params.vehicles):
    model = train_ppm([sc.mobility_history[v]], 2, R)
    for e in range(params.episodes):
        s = sc.episode_start(e)
        truth = oracle_residence(sc.today[v, s:s + T], T, R)
        err_ppm.append(np.abs(predict_residence(model, sc.today[v, :s], T) - truth).mean())
        err_uniform.append(np.abs(uniform_residence(R, T) - truth).mean())
print(f"residence MAE per RSU: PPM {np.mean(err_ppm):.3f} slots, uniform {np.mean(err_uniform):.3f} slots")

# demand: federated training over all vehicles with the default schedule;
# RSUs that nobody is attached to are skipped with a warning
warnings.simplefilter("ignore", RuntimeWarning)
F = params.catalog.file_count
rng = np.random.default_rng(0)
init = SasrecParams.init(F, 15, 32, rng, 0.1)
clients = [VehicleClient.sasrec(v, init, sc.request_history[v], 5, 100, rng) for v in range(params.vehicles)]
rsu_of = {v: int(sc.today[v, 0]) - 1 for v in range(params.vehicles)}
schedule = HflSchedule(kappa1=5, kappa2=2, lr=0.01)
for kappa in range(1, 101):
    losses = hfl_round(clients, rsu_of, params.topology.cluster_of, schedule, kappa)
    if losses and kappa % 20 == 1:
        print(f"round {kappa:3d}: mean local loss {np.mean(losses):7.1f}")

# how much of each vehicle's next-day traffic its top 10 files cover,
# against simply ranking files by past request counts
cover_model, cover_counts = [], []
for v in range(params.vehicles):
    row = predict_demand(SasrecParams.from_dict(clients[v].params), sc.request_history[v])
    counts = np.bincount(sc.request_history[v], minlength=F + 1)[1:]
    future = np.array([f for _, f in sc.requests_today[v]]) - 1
    cover_model.append(np.isin(future, np.argsort(-row)[:10]).mean())
    cover_counts.append(np.isin(future, np.argsort(-counts, kind="stable")[:10]).mean())
print(f"top-10 coverage of next-day requests: recommender {np.mean(cover_model):.3f}, "
      f"past counts {np.mean(cover_counts):.3f}")
