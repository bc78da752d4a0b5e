"""Design routes for a synthetic city three ways and compare the results.

Builds a 20-node Voronoi city, then trades off passenger and operator cost
at three values of alpha using the plain evolutionary algorithm. A small
policy is trained on 10-node cities and used both for best-of-K sampling
and as the mutation operator of the neural evolutionary algorithm.

Run with ``python3 demos/evolve_synthetic_city.py`` (about two minutes).
"""

import numpy as np

from tndp.bench import cmd_lc
from tndp.city import NdpParams, generate_city
from tndp.evolution import EaConfig, run
from tndp.policy import PolicyConfig
from tndp.training import TrainConfig, train

params = NdpParams(n_routes=5, min_stops=2, max_stops=8)
city = generate_city("voronoi", 20, 0.0, np.random.default_rng(7), params=params)
print(f"city: {city.n} nodes, {len(list(city.edges()))} street edges, "
      f"total demand {city.demand.sum() / 2:.0f} trips")

policy = train(TrainConfig(dataset_size=256, n_nodes=10, epochs=2, n_routes=3, max_stops=6,
                           policy=PolicyConfig(n_layers=2, d_model=32, d_ff=64))).net

print(f"\n{'alpha':>5}  {'method':<6} {'C':>7} {'C_p (min)':>10} {'C_o (min)':>10}")
for alpha in (0.0, 0.5, 1.0):
    results = {
        "LC-100": cmd_lc(city, policy, params, K=100, alpha=alpha, seed=0).cost,
        "EA": run(city, EaConfig(alpha=alpha, iterations=40, seed=0)).best.cost,
        "NEA": run(city, EaConfig(mode="nea", alpha=alpha, iterations=40, seed=0), net=policy).best.cost,
    }
    for name, cost in results.items():
        print(f"{alpha:5.1f}  {name:<6} {cost.total:7.4f} {cost.passenger / 60:10.2f} "
              f"{cost.operator / 60:10.1f}")
