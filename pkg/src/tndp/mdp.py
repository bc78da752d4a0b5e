"""Route-by-route construction process.

Decisions alternate: on odd timesteps the agent extends the in-progress route
by a stored shortest path, on even timesteps it decides whether to finish the
route. An episode ends once S routes are finished.
"""

from __future__ import annotations

import json
import weakref
from dataclasses import dataclass, field, replace
from typing import Protocol, Sequence, Union

import numpy as np

from .city import City, NdpParams
from .cost import CostBreakdown, CostWeights, Network, Route, as_network, total_cost
from .errors import IllegalActionError

CONTINUE = "continue"
HALT = "halt"
FRONT = "front"
BACK = "back"


@dataclass(frozen=True)
class ExtensionAction:
    """Attach a shortest path to the back (append) or front (prepend) of the route."""

    path: Route
    attach_end: str = BACK

    def apply(self, current: Route) -> Route:
        return current + self.path if self.attach_end == BACK else self.path + current


Action = Union[ExtensionAction, str]


class PathCatalog:
    """Every stored shortest path in both orientations, indexed ``u * n + v``.

    Index ``u * n + u`` holds the single-node path ``(u,)``, which is a legal
    extension of a non-empty route.
    """

    def __init__(self, city: City):
        n = city.n
        self.n = n
        paths = [None] * (n * n)
        for u in range(n):
            paths[u * n + u] = (u,)
            for v in range(u + 1, n):
                p = city.sp.walk(u, v)
                paths[u * n + v] = p
                paths[v * n + u] = p[::-1]
        self.paths = paths
        self.start = np.repeat(np.arange(n), n)
        self.end = np.tile(np.arange(n), n)
        self.length = np.array([len(p) for p in paths])
        member = np.zeros((n * n, n), dtype=bool)
        rows = np.repeat(np.arange(n * n), self.length)
        member[rows, np.concatenate(paths)] = True
        self.member = member
        self.flat_nodes = np.concatenate(paths)
        self.offsets = np.cumsum(self.length) - self.length
        lex = sorted(range(n * n), key=paths.__getitem__)
        self.lexrank = np.empty(n * n, dtype=int)
        self.lexrank[lex] = np.arange(n * n)
        self.adjacency = city.adjacency
        upper = self.start < self.end
        self.pair_index = np.flatnonzero(upper)

    def candidates(self, current: Route, max_stops: int) -> tuple[np.ndarray, np.ndarray]:
        """Legal extensions as (path indices, prepend flags) in canonical order."""
        m = len(current)
        if m == 0:
            k = self.pair_index[self.length[self.pair_index] <= max_stops]
            order = np.lexsort((self.lexrank[k], self.length[k], self.end[k]))
            return k[order], np.zeros(len(k), dtype=bool)
        room = max_stops - m
        if room <= 0:
            return np.zeros(0, dtype=int), np.zeros(0, dtype=bool)
        ok = (self.length <= room) & ~self.member[:, list(current)].any(axis=1)
        back = np.flatnonzero(ok & self.adjacency[current[-1]][self.start])
        front = np.flatnonzero(ok & self.adjacency[current[0]][self.end])
        k = np.concatenate([back, front])
        prepend = np.concatenate([np.zeros(len(back), bool), np.ones(len(front), bool)])
        terminal = np.where(prepend, self.start[k], self.end[k])
        order = np.lexsort((prepend, self.lexrank[k], self.length[k], terminal))
        return k[order], prepend[order]

    def nodes_of(self, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated node lists of paths ``k`` and the owning position in ``k``."""
        lengths = self.length[k]
        owner = np.repeat(np.arange(len(k)), lengths)
        pos = np.arange(lengths.sum()) - np.repeat(np.cumsum(lengths) - lengths, lengths)
        return self.flat_nodes[np.repeat(self.offsets[k], lengths) + pos], owner

    def actions(self, current: Route, max_stops: int) -> list[ExtensionAction]:
        k, prepend = self.candidates(current, max_stops)
        return [ExtensionAction(self.paths[i], FRONT if p else BACK) for i, p in zip(k, prepend)]


_catalogs: "weakref.WeakKeyDictionary[City, PathCatalog]" = weakref.WeakKeyDictionary()


def path_catalog(city: City) -> PathCatalog:
    cat = _catalogs.get(city)
    if cat is None:
        cat = _catalogs[city] = PathCatalog(city)
    return cat


@dataclass(frozen=True)
class MdpState:
    finished: Network
    current: Route
    t: int
    params: NdpParams
    alpha: float

    @property
    def terminal(self) -> bool:
        return len(self.finished) >= self.params.n_routes

    @property
    def extension_pending(self) -> bool:
        return self.t % 2 == 1

    def routes(self) -> Network:
        return self.finished + ((self.current,) if self.current else ())


def init_state(city: City, params: NdpParams, alpha: float, finished=()) -> MdpState:
    """Empty construction state, positioned at the first extension decision."""
    params.check_city(city.n)
    return MdpState(as_network(finished), (), 1, params, float(alpha))


def enumerate_extensions(city: City, state: MdpState) -> list[ExtensionAction]:
    return path_catalog(city).actions(state.current, state.params.max_stops)


def has_extension(city: City, state: MdpState) -> bool:
    return len(path_catalog(city).candidates(state.current, state.params.max_stops)[0]) > 0


def halt_actions(city: City, state: MdpState) -> list[str]:
    """Legal halt-step actions.

    A route that cannot be extended any further must halt even when shorter
    than the minimum, so every episode terminates.
    """
    m = len(state.current)
    if m >= state.params.max_stops or not has_extension(city, state):
        return [HALT]
    if m < state.params.min_stops:
        return [CONTINUE]
    return [CONTINUE, HALT]


def legal_actions(city: City, state: MdpState) -> list:
    if state.terminal:
        return []
    return enumerate_extensions(city, state) if state.extension_pending else halt_actions(city, state)


def apply_action(city: City, state: MdpState, action: Action) -> MdpState:
    if state.terminal:
        raise IllegalActionError("state is terminal")
    if state.extension_pending:
        if not isinstance(action, ExtensionAction) or action not in enumerate_extensions(city, state):
            raise IllegalActionError(f"{action!r} is not a legal extension of {state.current}")
        return replace(state, current=action.apply(state.current), t=state.t + 1)
    if action not in halt_actions(city, state):
        raise IllegalActionError(f"{action!r} is not legal for a route of length {len(state.current)}")
    if action == HALT:
        return replace(state, finished=state.finished + (state.current,), current=(), t=state.t + 1)
    return replace(state, t=state.t + 1)


class Policy(Protocol):
    def action_probs(self, city: City, state: MdpState, actions: Sequence) -> np.ndarray:
        """Probabilities over ``actions`` (which has at least two entries)."""


class RandomPolicy:
    """Uniform over legal actions."""

    def action_probs(self, city, state, actions):
        return np.full(len(actions), 1.0 / len(actions))


class GreedyHaltPolicy:
    """Halts as soon as it may; extensions are uniform."""

    def action_probs(self, city, state, actions):
        if state.extension_pending:
            return np.full(len(actions), 1.0 / len(actions))
        return np.array([1.0 if a == HALT else 0.0 for a in actions])


@dataclass
class Decision:
    t: int
    kind: str
    state: MdpState
    n_candidates: int
    chosen_index: int
    logp: float

    def to_dict(self) -> dict:
        return {"t": self.t, "kind": self.kind, "n_candidates": self.n_candidates,
                "chosen_index": self.chosen_index, "logp": self.logp}


@dataclass
class Episode:
    routes: Network
    decisions: list[Decision] = field(default_factory=list)
    cost: CostBreakdown | None = None

    @property
    def reward(self) -> float:
        return -self.cost.total

    @property
    def log_prob(self) -> float:
        return float(sum(d.logp for d in self.decisions))

    def log_jsonl(self) -> str:
        return "".join(json.dumps(d.to_dict()) + "\n" for d in self.decisions)


def choose(probs: np.ndarray, rng: np.random.Generator | None, greedy: bool) -> int:
    """Argmax when greedy, otherwise inverse-CDF sampling with one uniform draw."""
    if greedy or rng is None:
        return int(np.argmax(probs))
    cdf = np.cumsum(probs)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(probs) - 1))


def run_episode(city: City, policy: Policy, state: MdpState, rng, greedy: bool = False) -> Episode:
    decisions = []
    while not state.terminal:
        actions = legal_actions(city, state)
        kind = "ext" if state.extension_pending else "halt"
        if len(actions) == 1:
            idx, logp = 0, 0.0
        else:
            probs = np.asarray(policy.action_probs(city, state, actions), dtype=float)
            idx = choose(probs, rng, greedy)
            logp = float(np.log(probs[idx]))
        decisions.append(Decision(state.t, kind, state, len(actions), idx, logp))
        state = apply_action(city, state, actions[idx])
    return Episode(state.finished, decisions)


def rollout(city: City, policy: Policy, params: NdpParams, alpha: float,
            rng: np.random.Generator | None, *, greedy: bool = False,
            beta: float = 5.0, transfer_penalty: float = 300.0) -> Episode:
    """Build a complete network of S routes and attach its cost."""
    episode = run_episode(city, policy, init_state(city, params, alpha), rng, greedy)
    episode.cost = total_cost(city, episode.routes, params,
                              CostWeights(alpha, beta, transfer_penalty))
    return episode


def rollout_single_route(city: City, partial, policy: Policy, params: NdpParams, alpha: float,
                         rng: np.random.Generator | None, *, greedy: bool = False) -> Route:
    """Generate one route to complete a network that already has S - 1 routes."""
    partial = as_network(partial)
    if len(partial) != params.n_routes - 1:
        raise ValueError(f"partial network has {len(partial)} routes, expected {params.n_routes - 1}")
    state = init_state(city, params, alpha, finished=partial)
    return run_episode(city, policy, state, rng, greedy).routes[-1]
