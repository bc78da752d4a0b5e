"""Population-based improvement of route networks (EA and neural EA).

Each iteration runs a mutation stage, where every individual gets ``N_m``
mutation attempts that are kept only if they lower its cost, followed by a
selection stage where costly individuals tend to die and are replaced by
copies of cheaper survivors.

In ``ea`` mode half of the population is mutated by the type-1 mutator
(replace a route by a shortest path from one of its terminals); in ``nea``
mode that half is mutated by regenerating one route with the learned policy.
The other half always receives the type-2 mutator (grow or trim a terminal).
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .city import City, NdpParams
from .cost import CostBreakdown, CostWeights, Network, as_network, total_cost
from .errors import DegenerateNetworkError
from .mdp import RandomPolicy, rollout
from .streams import stream

MODES = ("ea", "nea")
DELETE_PROB = 0.2
DEATH_EPS = 1e-12
HISTORY_COLUMNS = ("iter", "best_C", "mean_C", "best_Cp_minutes", "best_Co_minutes", "best_Cc")


@dataclass
class EaConfig:
    population_size: int = 10
    mutations: int = 10
    iterations: int = 400
    mode: str = "ea"
    alpha: float = 1.0
    beta: float = 5.0
    transfer_penalty: float = 300.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")

    @property
    def weights(self) -> CostWeights:
        return CostWeights(self.alpha, self.beta, self.transfer_penalty)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Individual:
    network: Network
    cost: CostBreakdown | None = None

    @property
    def dirty(self) -> bool:
        return self.cost is None

    @property
    def total(self) -> float:
        return self.cost.total

    def copy(self) -> Individual:
        return Individual(self.network, self.cost)


def evaluate(city: City, network, params: NdpParams, weights: CostWeights) -> CostBreakdown | None:
    """Cost of ``network``, or ``None`` if it serves no demand at all."""
    try:
        return total_cost(city, network, params, weights)
    except DegenerateNetworkError:
        return None


def init_population(city: City, params: NdpParams, config: EaConfig) -> list[Individual]:
    """Random-policy constructions, one independent stream per slot."""
    policy = RandomPolicy()
    population = []
    for b in range(config.population_size):
        rng = stream(config.seed, "init", b)
        while True:
            ep = rollout(city, policy, params, config.alpha, rng, beta=config.beta,
                         transfer_penalty=config.transfer_penalty)
            if ep.cost is not None:
                break
        population.append(Individual(ep.routes, ep.cost))
    return population


def _replace(network: Network, k: int, route) -> Network:
    return network[:k] + (tuple(int(v) for v in route),) + network[k + 1:]


def mutate_type1(network: Network, city: City, rng: np.random.Generator) -> Network:
    """Replace a random route by the shortest path from one of its terminals.

    Always consumes exactly three draws from ``rng``.
    """
    k = int(rng.integers(len(network)))
    side = int(rng.integers(2))
    j = int(rng.integers(city.n - 1))
    route = network[k]
    i = route[0] if side == 0 else route[-1]
    if j >= i:
        j += 1
    return _replace(network, k, city.sp.path(i, j))


def mutate_type2(network: Network, city: City, rng: np.random.Generator) -> Network:
    """Trim a terminal (probability 0.2) or grow the route by a free street neighbor.

    Always consumes exactly four draws from ``rng``, so two runs that share
    this stream make identical choices whatever the networks look like.
    """
    k = int(rng.integers(len(network)))
    side = int(rng.integers(2))
    delete = rng.random() < DELETE_PROB
    pick = rng.random()
    route = network[k]
    if delete:
        if len(route) <= 1:
            return network
        return _replace(network, k, route[1:] if side == 0 else route[:-1])
    i = route[0] if side == 0 else route[-1]
    used = set(route)
    free = [j for j in city.neighbors[i] if j not in used]
    if not free:
        return network
    j = free[min(int(pick * len(free)), len(free) - 1)]
    return _replace(network, k, (j,) + route if side == 0 else route + (j,))


def mutate_neural(networks, city: City, net, params: NdpParams, alpha: float, rngs,
                  greedy: bool = False) -> list[Network]:
    """Regenerate one random route of each network with the policy.

    Takes a list of networks (one generator each) so several individuals can
    share batched policy evaluations; results match one-at-a-time calls.
    """
    removed = [int(rng.integers(len(nw))) for nw, rng in zip(networks, rngs)]
    partial = [nw[:k] + nw[k + 1:] for nw, k in zip(networks, removed)]
    episodes = net.rollout([city] * len(networks), params, alpha, list(rngs), greedy=greedy,
                           starts=partial, with_cost=False)
    return [p + (ep.routes[-1],) for p, ep in zip(partial, episodes)]


@dataclass
class StageStreams:
    """Independent generators for every source of randomness in the search."""

    partition: np.random.Generator
    type1: np.random.Generator
    type2: np.random.Generator
    neural: list[np.random.Generator]
    selection: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, population_size: int) -> StageStreams:
        return cls(stream(seed, "partition"), stream(seed, "type1"), stream(seed, "type2"),
                   [stream(seed, "neural", b) for b in range(population_size)],
                   stream(seed, "selection"))


def mutation_stage(population: list[Individual], city: City, params: NdpParams, config: EaConfig,
                   streams: StageStreams, net=None) -> list[Individual]:
    """Apply ``N_m`` keep-if-better mutation attempts to every individual.

    A random half (``B // 2`` individuals) gets the mode's primary mutator,
    the rest get type-2. Returns a new list; slot order is preserved.
    """
    if config.mode == "nea" and net is None:
        raise ValueError("nea mode needs a policy")
    weights = config.weights
    population = [ind.copy() for ind in population]
    order = streams.partition.permutation(len(population))
    primary = sorted(order[:len(population) // 2].tolist())
    secondary = sorted(order[len(population) // 2:].tolist())

    def consider(slot, candidate):
        cost = evaluate(city, candidate, params, weights)
        if cost is not None and cost.total < population[slot].total:
            population[slot] = Individual(candidate, cost)

    for _ in range(config.mutations):
        if config.mode == "nea":
            nets = mutate_neural([population[s].network for s in primary], city, net, params,
                                 config.alpha, [streams.neural[s] for s in primary])
            for s, cand in zip(primary, nets):
                consider(s, cand)
        else:
            for s in primary:
                consider(s, mutate_type1(population[s].network, city, streams.type1))
        for s in secondary:
            consider(s, mutate_type2(population[s].network, city, streams.type2))
    return population


def death_probabilities(costs: np.ndarray) -> np.ndarray:
    """Linear death rule; the first cheapest individual never dies."""
    costs = np.asarray(costs, dtype=float)
    lo, hi = costs.min(), costs.max()
    p = (costs - lo) / (hi - lo + DEATH_EPS)
    p[int(np.argmin(costs))] = 0.0
    return p


def selection_stage(population: list[Individual], rng: np.random.Generator) -> list[Individual]:
    """Kill individuals with cost-increasing probability, refill from survivors ∝ 1/C."""
    costs = np.array([ind.total for ind in population])
    alive = rng.random(len(population)) >= death_probabilities(costs)
    survivors = np.flatnonzero(alive)
    inv = 1.0 / costs[survivors]
    out = []
    for b, ind in enumerate(population):
        if alive[b]:
            out.append(ind)
        else:
            out.append(population[int(rng.choice(survivors, p=inv / inv.sum()))].copy())
    return out


@dataclass
class EaResult:
    best: Individual
    history: list[dict]
    population: list[Individual] = field(repr=False)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "history.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
            writer.writeheader()
            writer.writerows(self.history)
        (out / "network.json").write_text(json.dumps([list(r) for r in self.best.network]))
        (out / "cost.json").write_text(json.dumps(self.best.cost.to_dict(), indent=2))


def _history_row(it: int, best: Individual, population) -> dict:
    c = best.cost
    return {"iter": it, "best_C": c.total, "mean_C": float(np.mean([i.total for i in population])),
            "best_Cp_minutes": c.passenger_minutes, "best_Co_minutes": c.operator_minutes,
            "best_Cc": c.constraint}


def run(city: City, config: EaConfig, net=None, params: NdpParams | None = None,
        on_stage=None) -> EaResult:
    """Alternate mutation and selection for ``config.iterations`` iterations.

    Returns the cheapest network seen at any point. ``on_stage``, if given, is
    called as ``on_stage(kind, before, after)`` after every stage.
    """
    params = params or city.params
    if params is None:
        raise ValueError("city has no route parameters; pass params")
    if config.mode == "nea" and net is None:
        raise ValueError("nea mode needs a policy")
    streams = StageStreams.from_seed(config.seed, config.population_size)
    population = init_population(city, params, config)
    best = min(population, key=lambda i: i.total).copy()
    history = [_history_row(0, best, population)]
    for it in range(1, config.iterations + 1):
        mutated = mutation_stage(population, city, params, config, streams, net)
        if on_stage:
            on_stage("mutation", population, mutated)
        population = selection_stage(mutated, streams.selection)
        if on_stage:
            on_stage("selection", mutated, population)
        champion = min(population, key=lambda i: i.total)
        if champion.total < best.total:
            best = champion.copy()
        history.append(_history_row(it, best, population))
    return EaResult(best, history, population)


def load_network(path) -> Network:
    return as_network(json.loads(Path(path).read_text()))
