import itertools

import numpy as np
import pytest

from tndp.city import City, NdpParams


def make_city(n_nodes, edges, demand=None, params=None, positions=None):
    """City from an explicit ``(i, j, tau)`` edge list; demand defaults to all-ones."""
    if positions is None:
        angle = 2 * np.pi * np.arange(n_nodes) / n_nodes
        positions = np.column_stack([np.cos(angle), np.sin(angle)]) * 1000.0
    if demand is None:
        demand = np.ones((n_nodes, n_nodes)) - np.eye(n_nodes)
    return City.from_edges(positions, edges, demand, params=params)


def path_graph(n_nodes, tau=60.0, params=None):
    return make_city(n_nodes, [(i, i + 1, tau) for i in range(n_nodes - 1)], params=params)


def random_integer_city(rng, n_nodes, extra_edges=None, max_time=20):
    """Connected random city with integer edge times (exact float arithmetic)."""
    order = rng.permutation(n_nodes)
    edges = {}
    for k in range(1, n_nodes):
        a, b = int(order[k]), int(order[rng.integers(k)])
        edges[(min(a, b), max(a, b))] = None
    pairs = list(itertools.combinations(range(n_nodes), 2))
    extra = rng.integers(0, n_nodes) if extra_edges is None else extra_edges
    for idx in rng.permutation(len(pairs))[:extra]:
        edges[pairs[idx]] = None
    weighted = [(i, j, float(rng.integers(1, max_time + 1))) for i, j in edges]
    demand = np.zeros((n_nodes, n_nodes))
    iu = np.triu_indices(n_nodes, 1)
    demand[iu] = rng.integers(1, 50, size=len(iu[0]))
    demand += demand.T
    return make_city(n_nodes, weighted, demand=demand, positions=rng.uniform(0, 1000, (n_nodes, 2)))


def random_walk_route(city, rng, max_len):
    """A random simple street path."""
    route = [int(rng.integers(city.n))]
    while len(route) < max_len:
        free = [j for j in city.neighbors[route[-1]] if j not in route]
        if not free:
            break
        route.append(int(rng.choice(free)))
    return tuple(route)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mandl_like():
    """A fixed 15-node synthetic city with Mandl-sized route parameters."""
    from tndp.city import generate_city
    return generate_city("4nn", 15, 0.0, np.random.default_rng(7), params=NdpParams(6, 2, 8))
