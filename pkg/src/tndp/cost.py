"""Transit assignment and the passenger/operator/constraint cost model.

A network is a sequence of routes, each route a sequence of node indices
traversed in both directions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from .city import City, NdpParams
from .errors import DegenerateNetworkError, InvalidNetworkError

DEFAULT_TRANSFER_PENALTY = 300.0
DEFAULT_BETA = 5.0

Route = tuple[int, ...]
Network = tuple[Route, ...]


def as_network(routes) -> Network:
    return tuple(tuple(int(v) for v in r) for r in routes)


def check_route(city: City, route) -> None:
    """Raise ``InvalidNetworkError`` unless ``route`` is a simple street path."""
    r = np.asarray(route, dtype=int)
    if len(np.unique(r)) != len(r):
        raise InvalidNetworkError(f"route {list(route)} revisits a node")
    if len(r) and (r.min() < 0 or r.max() >= city.n):
        raise InvalidNetworkError(f"route {list(route)} names a node outside 0..{city.n - 1}")
    gaps = np.flatnonzero(~city.adjacency[r[:-1], r[1:]])
    if len(gaps):
        a, b = r[gaps[0]], r[gaps[0] + 1]
        raise InvalidNetworkError(f"no street edge between consecutive stops {a} and {b}")


def route_time(city: City, route) -> float:
    """One-directional drive time along ``route``."""
    r = np.asarray(route)
    return float(city.street_times[r[:-1], r[1:]].sum()) if len(r) > 1 else 0.0


@dataclass(frozen=True, eq=False)
class TransitAssignment:
    """Shortest transit trip times (seconds, transfer penalties included)."""

    times: np.ndarray
    connected: np.ndarray
    transfers: np.ndarray | None = None


def _expanded_graph(city: City, routes: Network, transfer_penalty: float):
    n = city.n
    sizes = [len(r) for r in routes]
    stops = np.fromiter((v for r in routes for v in r), dtype=int, count=sum(sizes))
    route_of = np.repeat(np.arange(len(routes)), sizes)
    m = len(stops)
    vid = 2 * n + np.arange(m)  # route-stop vertices follow n sources and n sinks

    rows, cols, data = [], [], []
    # boarding: source i -> (r, i); alighting: (r, j) -> sink j
    rows += [stops, vid]
    cols += [vid, n + stops]
    data += [np.zeros(m), np.zeros(m)]
    # riding between consecutive stops, both directions
    same_route = route_of[:-1] == route_of[1:]
    a, b = vid[:-1][same_route], vid[1:][same_route]
    leg = city.street_times[stops[:-1][same_route], stops[1:][same_route]]
    rows += [a, b]
    cols += [b, a]
    data += [leg, leg]
    # transfers between different routes at a shared stop
    order = np.argsort(stops, kind="stable")
    ordered = stops[order]
    first = np.searchsorted(ordered, ordered, side="left")
    size = np.searchsorted(ordered, ordered, side="right") - first
    mine = np.repeat(np.arange(m), size)
    other = first[mine] + np.arange(mine.size) - np.repeat(np.cumsum(size) - size, size)
    keep = mine != other
    rows.append(vid[order[mine[keep]]])
    cols.append(vid[order[other[keep]]])
    data.append(np.full(int(keep.sum()), float(transfer_penalty)))
    size = 2 * n + m
    graph = csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(size, size))
    return graph, stops, vid


def assign_transit_times(city: City, routes, transfer_penalty: float = DEFAULT_TRANSFER_PENALTY,
                         with_transfers: bool = False) -> TransitAssignment:
    """Shortest transit trip between every node pair over ``routes``.

    Builds an expanded graph with one vertex per (route, stop) incidence plus a
    boarding source and an alighting sink per node, and runs Dijkstra from
    every source. Transfers cost ``transfer_penalty`` seconds.
    """
    routes = as_network(routes)
    for r in routes:
        check_route(city, r)
    n = city.n
    routes = tuple(r for r in routes if r)
    if not routes:
        times = np.full((n, n), np.inf)
        np.fill_diagonal(times, 0.0)
        connected = np.eye(n, dtype=bool)
        return TransitAssignment(times, connected, np.zeros((n, n), int) if with_transfers else None)

    graph, stops, vid = _expanded_graph(city, routes, transfer_penalty)
    dist, pred = dijkstra(graph, directed=True, indices=np.arange(n), return_predecessors=True)
    times = dist[:, n:2 * n].copy()
    np.fill_diagonal(times, 0.0)
    connected = np.isfinite(times)

    transfers = None
    if with_transfers:
        transfers = np.zeros((n, n), dtype=int)
        stop_of = np.full(graph.shape[0], -1)
        stop_of[vid] = stops
        cur = np.broadcast_to(n + np.arange(n), (n, n)).copy()
        src = np.arange(n)[:, None]
        cur[~connected] = -9999
        active = cur >= 0
        while active.any():
            prev = np.where(active, pred[np.broadcast_to(src, cur.shape), np.maximum(cur, 0)], -9999)
            both = active & (prev >= 2 * n) & (cur >= 2 * n)
            transfers += both & (stop_of[np.maximum(prev, 0)] == stop_of[np.maximum(cur, 0)])
            cur = prev
            active = cur >= 0
        np.fill_diagonal(transfers, 0)
    return TransitAssignment(times, connected, transfers)


def passenger_cost(city: City, assignment: TransitAssignment) -> float:
    """Demand-weighted mean transit trip time over connected pairs, in seconds."""
    mask = assignment.connected & ~np.eye(city.n, dtype=bool)
    demand = city.demand[mask]
    total = demand.sum()
    if total <= 0:
        raise DegenerateNetworkError("network serves no demand")
    return float((demand * assignment.times[mask]).sum() / total)


def operator_cost(city: City, routes) -> float:
    """Total time to drive every route end to end in both directions, in seconds."""
    return float(sum(2.0 * route_time(city, r) for r in routes))


def length_violation(routes, params: NdpParams) -> int:
    return sum(max(0, len(r) - params.max_stops) + max(0, params.min_stops - len(r))
               for r in routes)


def constraint_cost(city: City, routes, assignment: TransitAssignment, params: NdpParams) -> float:
    """Unconnected-pair fraction plus per-stop length violation averaged over S.

    Each route missing from an incomplete network adds 1.
    """
    n = city.n
    unconnected = np.count_nonzero(~assignment.connected[np.triu_indices(n, k=1)])
    cost = unconnected / (n * (n - 1) / 2) + length_violation(routes, params) / params.n_routes
    return cost + max(0, params.n_routes - len(routes))


@dataclass(frozen=True)
class CostWeights:
    """Trade-off weight alpha, constraint weight beta and transfer penalty (s)."""

    alpha: float
    beta: float = DEFAULT_BETA
    transfer_penalty: float = DEFAULT_TRANSFER_PENALTY

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(min(1.0, max(0.0, self.alpha))))

    @staticmethod
    def scales(city: City, n_routes: int) -> tuple[float, float]:
        """Passenger and operator rescaling constants for this city and S."""
        t_max = float(city.times.max())
        return 1.0 / t_max, 1.0 / (3.0 * n_routes * t_max)


@dataclass(frozen=True)
class CostBreakdown:
    total: float
    passenger: float
    operator: float
    constraint: float
    alpha: float
    transfer_penalty: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "C_p_seconds": self.passenger,
            "C_o_seconds": self.operator,
            "C_c": self.constraint,
            "C_total": self.total,
            "p_T": self.transfer_penalty,
        }

    @property
    def passenger_minutes(self) -> float:
        return self.passenger / 60.0

    @property
    def operator_minutes(self) -> float:
        return self.operator / 60.0


def total_cost(city: City, routes, params: NdpParams, weights: CostWeights) -> CostBreakdown:
    """Weighted sum of rescaled passenger and operator costs plus constraint penalty."""
    routes = as_network(routes)
    assignment = assign_transit_times(city, routes, weights.transfer_penalty)
    c_p = passenger_cost(city, assignment)
    c_o = operator_cost(city, routes)
    c_c = constraint_cost(city, routes, assignment, params)
    w_p, w_o = CostWeights.scales(city, params.n_routes)
    a = weights.alpha
    total = a * w_p * c_p + (1.0 - a) * w_o * c_o + weights.beta * c_c
    return CostBreakdown(total, c_p, c_o, c_c, a, weights.transfer_penalty)


def constraint_report(city: City, routes, params: NdpParams,
                      weights: CostWeights | None = None) -> dict:
    """Pass/fail for each of the five network constraints, with details."""
    routes = as_network(routes)
    report: dict = {"n_routes": len(routes)}
    bad_cycles = [k for k, r in enumerate(routes) if len(set(r)) != len(r)]
    skips = []
    for k, r in enumerate(routes):
        for a, b in zip(r, r[1:]):
            if not (0 <= a < city.n and 0 <= b < city.n) or not city.adjacency[a, b]:
                skips.append({"route": k, "pair": [a, b]})
    lengths = [{"route": k, "length": len(r)} for k, r in enumerate(routes)
               if not params.min_stops <= len(r) <= params.max_stops]
    report["constraints"] = {
        "1_all_pairs_connected": None,
        "2_route_count": len(routes) == params.n_routes,
        "3_route_lengths": not lengths,
        "4_no_cycles": not bad_cycles,
        "5_no_skipped_nodes": not skips,
    }
    report["length_violations"] = lengths
    report["cyclic_routes"] = bad_cycles
    report["skipped_pairs"] = skips
    if bad_cycles or skips:
        report["unconnected_pairs"] = None
        report["cost"] = None
        report["valid"] = False
        return report
    assignment = assign_transit_times(city, routes, (weights or CostWeights(1.0)).transfer_penalty)
    unconnected = int(np.count_nonzero(~assignment.connected[np.triu_indices(city.n, k=1)]))
    report["unconnected_pairs"] = unconnected
    report["constraints"]["1_all_pairs_connected"] = unconnected == 0
    if weights is not None:
        try:
            report["cost"] = total_cost(city, routes, params, weights).to_dict()
        except DegenerateNetworkError:
            report["cost"] = None
    report["valid"] = all(report["constraints"].values())
    return report
