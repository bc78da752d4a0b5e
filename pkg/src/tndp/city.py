"""City representation, synthetic generators, augmentation and benchmark I/O.

A city is a street graph over candidate stop locations together with a
symmetric origin-destination demand matrix. All times are in seconds and all
positions in meters.
"""

from __future__ import annotations

import io
import json
import math
import os
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import Voronoi

from .errors import BenchmarkFormatError, DisconnectedGraphError

SQUARE_SIDE_M = 30_000.0
VEHICLE_SPEED_MPS = 15.0
DEMAND_RANGE = (60.0, 800.0)
CITY_KINDS = ("4nn", "4grid", "8grid", "voronoi")
MAX_GENERATION_ATTEMPTS = 1000
VORONOI_SEARCH_TRIES = 50


@dataclass(frozen=True)
class NdpParams:
    """Route count and per-route stop bounds."""

    n_routes: int
    min_stops: int
    max_stops: int

    def __post_init__(self):
        if self.n_routes < 1:
            raise ValueError(f"n_routes must be >= 1, got {self.n_routes}")
        if not 2 <= self.min_stops <= self.max_stops:
            raise ValueError(
                f"need 2 <= min_stops <= max_stops, got {self.min_stops}, {self.max_stops}")

    def check_city(self, n_nodes: int) -> None:
        if self.max_stops > n_nodes:
            raise ValueError(f"max_stops={self.max_stops} exceeds node count {n_nodes}")

    def to_dict(self) -> dict:
        return {"S": self.n_routes, "MIN": self.min_stops, "MAX": self.max_stops}

    @classmethod
    def from_dict(cls, d: dict) -> NdpParams:
        return cls(int(d["S"]), int(d["MIN"]), int(d["MAX"]))


@dataclass(frozen=True)
class BenchmarkInfo:
    name: str
    n_nodes: int
    n_edges: int
    params: NdpParams
    area_km2: float


# Published statistics of the Mandl and Mumford instances.
BENCHMARKS = {
    info.name.lower(): info for info in (
        BenchmarkInfo("Mandl", 15, 20, NdpParams(6, 2, 8), 352.7),
        BenchmarkInfo("Mumford0", 30, 90, NdpParams(12, 2, 15), 354.2),
        BenchmarkInfo("Mumford1", 70, 210, NdpParams(15, 10, 30), 858.5),
        BenchmarkInfo("Mumford2", 110, 385, NdpParams(56, 10, 22), 1394.3),
        BenchmarkInfo("Mumford3", 127, 425, NdpParams(60, 12, 25), 1703.2),
    )
}


@dataclass(frozen=True, eq=False)
class ShortestPathTable:
    """All-pairs drive times plus a successor table for path reconstruction.

    ``next_hop[i, j]`` is the node following ``i`` on the stored path to ``j``.
    Among equally short continuations the lowest node index wins.
    """

    times: np.ndarray
    next_hop: np.ndarray

    @property
    def n(self) -> int:
        return len(self.times)

    def walk(self, i: int, j: int) -> tuple[int, ...]:
        path = [i]
        while i != j:
            i = int(self.next_hop[i, j])
            path.append(i)
        return tuple(path)

    def path(self, i: int, j: int) -> tuple[int, ...]:
        """Canonical shortest path from ``i`` to ``j``.

        One path is stored per unordered pair (walked from the lower index);
        asking for the reverse direction returns it reversed.
        """
        if i <= j:
            return self.walk(i, j)
        return self.walk(j, i)[::-1]


def all_pairs_shortest_paths(street_times: np.ndarray) -> ShortestPathTable:
    """Exact shortest drive times with deterministic path reconstruction.

    ``street_times`` is an n x n matrix holding edge times and ``inf`` where
    no street edge exists. Raises ``DisconnectedGraphError`` if any pair is
    unreachable.
    """
    w = np.asarray(street_times, dtype=float)
    n = len(w)
    adj = np.isfinite(w) & ~np.eye(n, dtype=bool)
    if np.any(w[adj] <= 0):
        raise ValueError("street edge times must be positive")
    rows, cols = np.nonzero(adj)
    graph = csr_matrix((w[rows, cols], (rows, cols)), shape=(n, n))
    times = dijkstra(graph, directed=True)
    unreachable = np.argwhere(np.isinf(times))
    if len(unreachable):
        i, j = unreachable[0]
        raise DisconnectedGraphError(f"node {j} is unreachable from node {i}")
    if np.array_equal(adj, adj.T) and np.allclose(w[adj], w.T[adj]):
        times = np.minimum(times, times.T)

    # k is a valid successor of i towards j iff w[i,k] + T[k,j] == T[i,j]
    via = np.where(adj[:, :, None], w[:, :, None] + times[None, :, :], np.inf)
    tight = np.isclose(via, times[:, None, :], rtol=1e-9, atol=0.0)
    next_hop = np.argmax(tight, axis=1)
    np.fill_diagonal(next_hop, np.arange(n))
    times.setflags(write=False)
    next_hop.setflags(write=False)
    return ShortestPathTable(times, next_hop)


class City:
    """Street graph, demand matrix and derived shortest-path table.

    Instances are treated as immutable; the arrays are marked read-only.
    """

    def __init__(self, positions, street_times, demand, *, params: NdpParams | None = None,
                 synthetic_positions: bool = False, name: str | None = None):
        positions = np.array(positions, dtype=float).reshape(-1, 2)
        street_times = np.array(street_times, dtype=float)
        demand = np.array(demand, dtype=float)
        n = len(positions)
        if street_times.shape != (n, n) or demand.shape != (n, n):
            raise ValueError(f"expected {n}x{n} matrices, got {street_times.shape} and {demand.shape}")
        np.fill_diagonal(street_times, np.inf)
        if not np.array_equal(street_times, street_times.T):
            raise ValueError("street edges must be symmetric")
        if np.any(demand < 0) or not np.allclose(demand, demand.T, rtol=0, atol=1e-6):
            raise ValueError("demand must be non-negative and symmetric")
        if np.any(np.diag(demand) != 0):
            raise ValueError("demand diagonal must be zero")
        if params is not None:
            params.check_city(n)
        for arr in (positions, street_times, demand):
            arr.setflags(write=False)
        self.positions = positions
        self.street_times = street_times
        self.demand = demand
        self.params = params
        self.synthetic_positions = synthetic_positions
        self.name = name
        self.sp = all_pairs_shortest_paths(street_times)

    @classmethod
    def from_edges(cls, positions, edges, demand, **kwargs) -> City:
        n = len(positions)
        street_times = np.full((n, n), np.inf)
        for i, j, tau in edges:
            street_times[i, j] = street_times[j, i] = tau
        return cls(positions, street_times, demand, **kwargs)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def times(self) -> np.ndarray:
        return self.sp.times

    @cached_property
    def adjacency(self) -> np.ndarray:
        adj = np.isfinite(self.street_times)
        adj.setflags(write=False)
        return adj

    @cached_property
    def neighbors(self) -> tuple[tuple[int, ...], ...]:
        return tuple(tuple(np.flatnonzero(row).tolist()) for row in self.adjacency)

    def edges(self) -> list[tuple[int, int, float]]:
        """Undirected street edges as ``(i, j, tau)`` with ``i < j``."""
        ii, jj = np.nonzero(np.triu(self.adjacency))
        return [(int(i), int(j), float(self.street_times[i, j])) for i, j in zip(ii, jj)]

    @property
    def n_edges(self) -> int:
        return int(np.count_nonzero(self.adjacency)) // 2

    def with_params(self, params: NdpParams) -> City:
        return City(self.positions, self.street_times, self.demand, params=params,
                    synthetic_positions=self.synthetic_positions, name=self.name)

    def permuted(self, perm) -> City:
        """Relabel nodes so that new node ``k`` is old node ``perm[k]``."""
        perm = np.asarray(perm)
        ix = np.ix_(perm, perm)
        return City(self.positions[perm], self.street_times[ix], self.demand[ix],
                    params=self.params, synthetic_positions=self.synthetic_positions,
                    name=self.name)

    # -- native JSON format -------------------------------------------------

    def to_dict(self) -> dict:
        doc = {
            "nodes": self.positions.tolist(),
            "edges": [[i, j, tau] for i, j, tau in self.edges()],
            "demand": self.demand.tolist(),
        }
        if self.params is not None:
            doc["params"] = self.params.to_dict()
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc: dict) -> City:
        try:
            params = NdpParams.from_dict(doc["params"]) if doc.get("params") else None
            edges = [(int(i), int(j), float(t)) for i, j, t in doc["edges"]]
            return cls.from_edges(doc["nodes"], edges, doc["demand"], params=params)
        except (KeyError, TypeError) as exc:
            raise BenchmarkFormatError(f"malformed city document: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> City:
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> City:
        return cls.from_json(Path(path).read_text())

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<City{label} n={self.n} edges={self.n_edges}>"


# -- synthetic generation ---------------------------------------------------

def _grid_shape(n: int) -> tuple[int, int]:
    rows = max(r for r in range(1, int(math.isqrt(n)) + 1) if n % r == 0)
    return rows, n // rows


def _grid_edges(n: int, diagonal: bool) -> tuple[np.ndarray, list[tuple[int, int]]]:
    rows, cols = _grid_shape(n)
    spacing = SQUARE_SIDE_M / max(rows - 1, cols - 1, 1)
    rr, cc = np.divmod(np.arange(n), cols)
    positions = np.column_stack([cc * spacing, rr * spacing]).astype(float)
    steps = [(0, 1), (1, 0)] + ([(1, 1), (1, -1)] if diagonal else [])
    edges = []
    for k in range(n):
        r, c = divmod(k, cols)
        for dr, dc in steps:
            r2, c2 = r + dr, c + dc
            if 0 <= r2 < rows and 0 <= c2 < cols:
                edges.append((k, r2 * cols + c2))
    return positions, edges


def _knn_edges(positions: np.ndarray, k: int = 4) -> list[tuple[int, int]]:
    dist = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    pairs = {(min(i, int(j)), max(i, int(j))) for i in range(len(positions)) for j in nearest[i]}
    return sorted(pairs)


def _voronoi_graph(m: int, rng: np.random.Generator):
    """Finite Voronoi vertices inside the square and the ridges between them.

    Returns the largest connected component as (positions, edges).
    """
    seeds = rng.uniform(0.0, SQUARE_SIDE_M, size=(m, 2))
    vor = Voronoi(seeds)
    verts = vor.vertices
    inside = np.all((verts >= 0.0) & (verts <= SQUARE_SIDE_M), axis=1)
    ridges = {(min(a, b), max(a, b)) for a, b in vor.ridge_vertices
              if a >= 0 and b >= 0 and a != b and inside[a] and inside[b]}
    if not ridges:
        return np.zeros((0, 2)), []
    used = sorted({v for r in ridges for v in r})
    index = {v: k for k, v in enumerate(used)}
    edges = [(index[a], index[b]) for a, b in sorted(ridges)]
    nv = len(used)
    e = np.array(edges)
    graph = csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(nv, nv))
    _, labels = connected_components(graph, directed=False)
    big = np.argmax(np.bincount(labels))
    keep = np.flatnonzero(labels == big)
    remap = -np.ones(nv, dtype=int)
    remap[keep] = np.arange(len(keep))
    edges = [(remap[a], remap[b]) for a, b in edges if remap[a] >= 0 and remap[b] >= 0]
    return verts[used][keep], edges


def _voronoi_nodes(n: int, rng: np.random.Generator):
    lo, hi = 2, None
    m = max(3, n // 2 + 2)
    best = None
    for _ in range(VORONOI_SEARCH_TRIES):
        positions, edges = _voronoi_graph(m, rng)
        count = len(positions)
        if count == n:
            return positions, edges
        if best is None or abs(count - n) < abs(len(best[0]) - n):
            best = (positions, edges)
        if count < n:
            lo = max(lo, m)
        else:
            hi = m if hi is None else min(hi, m)
        m_next = 2 * m if hi is None else (lo + hi) // 2
        if m_next in (lo, hi) and hi is not None and hi - lo <= 1:
            m_next = m  # bracket collapsed; redraw at the same seed count
        m = max(3, m_next)
    if best is not None and abs(len(best[0]) - n) <= 2:
        warnings.warn(f"voronoi city has {len(best[0])} nodes instead of {n}", stacklevel=3)
        return best
    raise RuntimeError(f"could not produce a voronoi city with about {n} nodes")


def _sample_demand(n: int, rng: np.random.Generator) -> np.ndarray:
    demand = np.zeros((n, n))
    iu = np.triu_indices(n, k=1)
    demand[iu] = rng.uniform(*DEMAND_RANGE, size=len(iu[0]))
    return demand + demand.T


def _is_connected(n: int, edges) -> bool:
    if n == 1:
        return True
    if not edges:
        return False
    e = np.asarray(edges)
    graph = csr_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    return connected_components(graph, directed=False)[0] == 1


def generate_city(kind: str, n: int, rho: float, rng: np.random.Generator,
                  params: NdpParams | None = None) -> City:
    """Draw a random city of one of the four street-network kinds.

    Edges are deleted independently with probability ``rho`` (never for
    ``voronoi``) and the draw is repeated until the street graph is connected.
    """
    if kind not in CITY_KINDS:
        raise ValueError(f"unknown city kind {kind!r}; choose from {CITY_KINDS}")
    if n < 4:
        raise ValueError("n must be at least 4")
    if not 0.0 <= rho < 1.0:
        raise ValueError("rho must lie in [0, 1)")

    for _ in range(MAX_GENERATION_ATTEMPTS):
        if kind == "4nn":
            positions = rng.uniform(0.0, SQUARE_SIDE_M, size=(n, 2))
            edges = _knn_edges(positions)
        elif kind in ("4grid", "8grid"):
            positions, edges = _grid_edges(n, diagonal=kind == "8grid")
        else:
            positions, edges = _voronoi_nodes(n, rng)
        if kind != "voronoi" and rho > 0:
            keep = rng.random(len(edges)) >= rho
            edges = [e for e, k in zip(edges, keep) if k]
        if _is_connected(len(positions), edges):
            break
    else:
        raise RuntimeError(
            f"no connected {kind} city after {MAX_GENERATION_ATTEMPTS} attempts; rho={rho} too high")

    nn = len(positions)
    times = [(i, j, float(np.linalg.norm(positions[i] - positions[j])) / VEHICLE_SPEED_MPS)
             for i, j in edges]
    return City.from_edges(positions, times, _sample_demand(nn, rng), params=params, name=kind)


def augment(city: City, rng: np.random.Generator, *, scale: float | None = None,
            angle: float | None = None, demand_scale: float | None = None) -> City:
    """Randomly rescale, rotate and reweight a city.

    Three values are always drawn from ``rng`` (so the stream position does not
    depend on the overrides): a space/time scale in [0.4, 1.6], a rotation
    angle in radians in [0, 2*pi), and a demand scale in [0.8, 1.2].
    """
    c_s, phi, c_d = rng.uniform(0.4, 1.6), rng.uniform(0.0, 2 * np.pi), rng.uniform(0.8, 1.2)
    c_s = c_s if scale is None else scale
    phi = phi if angle is None else angle
    c_d = c_d if demand_scale is None else demand_scale

    centroid = city.positions.mean(axis=0)
    rot = np.array([[np.cos(phi), -np.sin(phi)], [np.sin(phi), np.cos(phi)]])
    positions = centroid + c_s * (city.positions - centroid) @ rot.T
    return City(positions, city.street_times * c_s, city.demand * c_d, params=city.params,
                synthetic_positions=city.synthetic_positions, name=city.name)


# -- benchmark files --------------------------------------------------------

def read_matrix(source) -> np.ndarray:
    """Parse a whitespace-separated square matrix; ``Inf`` marks absent entries."""
    if isinstance(source, (str, os.PathLike)) and not (isinstance(source, str) and "\n" in source):
        text = Path(source).read_text()
    elif isinstance(source, str):
        text = source
    else:
        text = source.read()
    rows = []
    for line in io.StringIO(text):
        tokens = line.replace(",", " ").split()
        if not tokens:
            continue
        try:
            rows.append([np.inf if t.lower() in ("inf", "infinity") else float(t) for t in tokens])
        except ValueError as exc:
            raise BenchmarkFormatError(f"non-numeric entry: {exc}") from exc
    n = len(rows)
    if n == 0 or any(len(r) != n for r in rows):
        raise BenchmarkFormatError(f"matrix is not square ({n} rows, lengths {sorted({len(r) for r in rows})})")
    return np.array(rows)


def spring_layout(adjacency: np.ndarray, edge_lengths: np.ndarray, iterations: int = 300) -> np.ndarray:
    """Deterministic force-directed layout.

    Starts from a circle ordered by node index, then rescales so the mean
    drawn edge length matches the mean of ``edge_lengths`` over street edges.
    """
    n = len(adjacency)
    theta = 2 * np.pi * np.arange(n) / n
    pos = np.column_stack([np.cos(theta), np.sin(theta)])
    k = 1.0 / np.sqrt(n)
    temp = 0.1
    for _ in range(iterations):
        delta = pos[:, None, :] - pos[None, :, :]
        dist = np.maximum(np.linalg.norm(delta, axis=-1), 1e-9)
        force = k * k / dist**2 - adjacency * dist / k
        np.fill_diagonal(force, 0.0)
        disp = np.einsum("ij,ijk->ik", force, delta)
        length = np.maximum(np.linalg.norm(disp, axis=1, keepdims=True), 1e-9)
        pos += disp / length * np.minimum(length, temp)
        temp *= 0.99
    ii, jj = np.nonzero(np.triu(adjacency))
    drawn = np.linalg.norm(pos[ii] - pos[jj], axis=1).mean()
    pos *= edge_lengths[ii, jj].mean() / drawn
    return pos - pos.min(axis=0)


def load_benchmark(travel_time_source, demand_source, params: NdpParams | None = None,
                   coords_source=None, name: str | None = None) -> City:
    """Build a city from Mumford-format travel-time (minutes) and demand files.

    Without a coordinates file, node positions are synthesized by
    :func:`spring_layout` and flagged as synthetic; they feed neural features
    only and never drive times.
    """
    minutes = read_matrix(travel_time_source)
    demand = read_matrix(demand_source)
    n = len(minutes)
    if demand.shape != (n, n):
        raise BenchmarkFormatError(f"demand is {demand.shape}, travel times are {minutes.shape}")
    if not np.all(np.isfinite(demand)):
        raise BenchmarkFormatError("demand entries must be finite")
    off = ~np.eye(n, dtype=bool)
    finite = np.isfinite(minutes)
    if np.any(minutes[finite] < 0) or np.any(demand < 0):
        raise BenchmarkFormatError("negative entries are not allowed")
    if not np.array_equal(finite, finite.T) or not np.allclose(
            np.where(finite, minutes, 0), np.where(finite, minutes, 0).T, rtol=0, atol=1e-6):
        raise BenchmarkFormatError("travel-time matrix is not symmetric")
    if not np.allclose(demand, demand.T, rtol=0, atol=1e-6):
        raise BenchmarkFormatError("demand matrix is not symmetric")
    if np.any(minutes[finite & off] == 0):
        raise BenchmarkFormatError("zero travel time between distinct nodes")

    street = np.where(finite & off, minutes * 60.0, np.inf)
    street = np.minimum(street, street.T)
    demand = (demand + demand.T) / 2.0
    np.fill_diagonal(demand, 0.0)
    # surface disconnection as a format error before building the city
    try:
        all_pairs_shortest_paths(street)
    except DisconnectedGraphError as exc:
        raise BenchmarkFormatError(f"street graph is disconnected: {exc}") from exc

    if coords_source is not None:
        coords = np.loadtxt(coords_source, ndmin=2)
        if coords.shape != (n, 2):
            raise BenchmarkFormatError(f"expected {n}x2 coordinates, got {coords.shape}")
        positions, synthetic = coords, False
    else:
        positions = spring_layout(np.isfinite(street), street * VEHICLE_SPEED_MPS)
        synthetic = True
    return City(positions, street, demand, params=params, synthetic_positions=synthetic, name=name)


def load_named_benchmark(name: str, data_dir) -> City:
    """Load ``<Name>TravelTimes.txt`` / ``<Name>Demand.txt`` from ``data_dir``.

    Route parameters come from the published benchmark statistics. A
    ``<Name>Coords.txt`` file is used when present.
    """
    info = BENCHMARKS[name.lower()]
    data_dir = Path(data_dir)
    coords = data_dir / f"{info.name}Coords.txt"
    return load_benchmark(data_dir / f"{info.name}TravelTimes.txt",
                          data_dir / f"{info.name}Demand.txt", info.params,
                          coords_source=coords if coords.exists() else None, name=info.name)
