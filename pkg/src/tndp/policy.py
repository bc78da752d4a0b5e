"""Graph-attention construction policy and the reward baseline network.

The backbone treats the city as a fully connected graph whose edges carry
demand, drive-time, street and transit-connection features. Edge features
enter every attention layer as an additive per-head logit bias and as an
attention-weighted value term. Two small heads read the node embeddings: one
scores candidate extensions, the other decides whether to finish the route.

Checkpoint layout (``.npz``):

``meta``
    JSON string ``{"version", "feature_layout", "config"}``.
``policy/<name>``, ``baseline/<name>``
    parameter arrays.
``norm/<name>``
    input standardization statistics.
"""

from __future__ import annotations

import json
import weakref
import zipfile
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.sparse import csr_matrix

from . import autodiff as ad
from .autodiff import Tensor
from .city import City, NdpParams
from .cost import CostWeights, total_cost
from .errors import CheckpointError, TrainingDivergedError
from .mdp import (BACK, CONTINUE, FRONT, HALT, Decision, Episode, ExtensionAction, MdpState,
                  choose, init_state, path_catalog)

CHECKPOINT_VERSION = 1
FEATURE_LAYOUT_VERSION = 1
NODE_FEATURES = ("x", "y", "out_demand", "street_degree", "in_current", "is_terminal")
EDGE_FEATURES = ("demand", "drive_time", "street_time", "has_street", "direct_transit",
                 "adjacent_in_current")
GLOBAL_FEATURES = ("alpha", "finished_fraction", "current_fraction")
DESCRIPTOR_FEATURES = ("n", "mean_demand", "max_demand", "mean_time", "max_time", "S", "MIN", "MAX")
CANDIDATE_BUDGET = 200_000


@dataclass
class PolicyConfig:
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    head_hidden: int = 64
    baseline_hidden: int = 64
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class NormStats:
    """Per-feature mean and standard deviation for every input group."""

    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    glob_mean: np.ndarray
    glob_std: np.ndarray
    desc_mean: np.ndarray
    desc_std: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.asarray(v, dtype=np.float64) for k, v in asdict(self).items()}

    @classmethod
    def identity(cls) -> NormStats:
        sizes = (len(NODE_FEATURES), len(EDGE_FEATURES), len(GLOBAL_FEATURES),
                 len(DESCRIPTOR_FEATURES))
        return cls(*(f(k) for k in sizes for f in (np.zeros, np.ones)))


# -- features ---------------------------------------------------------------

_static_cache: "weakref.WeakKeyDictionary[City, tuple]" = weakref.WeakKeyDictionary()


def _static_features(city: City):
    cached = _static_cache.get(city)
    if cached is None:
        n = city.n
        adj = city.adjacency
        node = np.zeros((n, len(NODE_FEATURES)))
        node[:, 0:2] = city.positions
        node[:, 2] = city.demand.sum(axis=1)
        node[:, 3] = adj.sum(axis=1)
        edge = np.zeros((n, n, len(EDGE_FEATURES)))
        edge[..., 0] = city.demand
        edge[..., 1] = city.times
        edge[..., 2] = np.where(adj, city.street_times, 0.0)
        edge[..., 3] = adj
        cached = _static_cache[city] = (node, edge)
    return cached


def raw_features(city: City, state: MdpState):
    """Unstandardized (node, edge, global) features of ``state``."""
    node, edge = _static_features(city)
    node = node.copy()
    edge = edge.copy()
    cur = list(state.current)
    for r in state.routes():
        ix = np.ix_(r, r)
        edge[..., 4][ix] = 1.0
    if cur:
        node[cur, 4] = 1.0
        node[[cur[0], cur[-1]], 5] = 1.0
        a, b = np.array(cur[:-1], dtype=int), np.array(cur[1:], dtype=int)
        edge[a, b, 5] = 1.0
        edge[b, a, 5] = 1.0
    p = state.params
    glob = np.array([state.alpha, len(state.finished) / p.n_routes, len(cur) / p.max_stops])
    return node, edge, glob


def descriptor(city: City, params: NdpParams) -> np.ndarray:
    off = ~np.eye(city.n, dtype=bool)
    return np.array([city.n, city.demand[off].mean(), city.demand.max(), city.times[off].mean(),
                     city.times.max(), params.n_routes, params.min_stops, params.max_stops])


# -- network ----------------------------------------------------------------

def _init(rng, fan_in, shape, dtype, gain=1.0):
    return Tensor((rng.standard_normal(shape) * gain / np.sqrt(fan_in)).astype(dtype),
                  requires_grad=True)


def _zeros(shape, dtype, value=0.0):
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class PolicyNet:
    """Policy and baseline parameters plus the forward computations.

    Implements the ``Policy`` protocol of :mod:`tndp.mdp` for single states
    and a batched lockstep rollout (:meth:`rollout`).
    """

    def __init__(self, config: PolicyConfig | None = None, norm: NormStats | None = None,
                 seed: int = 0):
        self.config = config or PolicyConfig()
        self.norm = norm
        self.params: dict[str, Tensor] = {}
        self.baseline_params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))
        self._y_cache = None

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def _init_params(self, rng):
        c, dt = self.config, self.dtype
        d, h, dk = c.d_model, c.n_heads, c.d_model // c.n_heads
        ne, nn_, ng = len(EDGE_FEATURES), len(NODE_FEATURES), len(GLOBAL_FEATURES)
        p = self.params
        p["in.W"] = _init(rng, nn_, (nn_, d), dt)
        p["in.b"] = _zeros((d,), dt)
        for i in range(c.n_layers):
            pre = f"layer{i}."
            p[pre + "ln1.g"] = _zeros((d,), dt, 1.0)
            p[pre + "ln1.b"] = _zeros((d,), dt)
            for name in ("Wq", "Wk", "Wv"):
                p[pre + name] = _init(rng, d, (d, d), dt)
            p[pre + "We"] = _init(rng, ne, (ne, h), dt)
            p[pre + "Wev"] = _init(rng, ne, (h, ne, dk), dt)
            p[pre + "Wo"] = _init(rng, d, (d, d), dt, gain=0.5)
            p[pre + "ln2.g"] = _zeros((d,), dt, 1.0)
            p[pre + "ln2.b"] = _zeros((d,), dt)
            p[pre + "W1"] = _init(rng, d, (d, c.d_ff), dt)
            p[pre + "b1"] = _zeros((c.d_ff,), dt)
            p[pre + "W2"] = _init(rng, c.d_ff, (c.d_ff, d), dt, gain=0.5)
            p[pre + "b2"] = _zeros((d,), dt)
        p["out.ln.g"] = _zeros((d,), dt, 1.0)
        p["out.ln.b"] = _zeros((d,), dt)
        hh = c.head_hidden
        p["ext.Wmean"] = _init(rng, 2 * d + 2 + ng, (d, hh), dt)
        p["ext.Wterm"] = _init(rng, 2 * d + 2 + ng, (d, hh), dt)
        p["ext.Wx"] = _init(rng, 2 * d + 2 + ng, (2 + ng, hh), dt)
        p["ext.b1"] = _zeros((hh,), dt)
        p["ext.W2"] = _init(rng, hh, (hh, 1), dt, gain=0.1)
        p["ext.b2"] = _zeros((1,), dt)
        p["halt.Wr"] = _init(rng, d + ng, (d, hh), dt)
        p["halt.Wg"] = _init(rng, d + ng, (ng, hh), dt)
        p["halt.b1"] = _zeros((hh,), dt)
        p["halt.W2"] = _init(rng, hh, (hh, 1), dt, gain=0.1)
        p["halt.b2"] = _zeros((1,), dt)
        hb = c.baseline_hidden
        b = self.baseline_params
        nd = len(DESCRIPTOR_FEATURES) + 1
        b["W1"] = _init(rng, nd, (nd, hb), dt)
        b["b1"] = _zeros((hb,), dt)
        b["W2"] = _init(rng, hb, (hb, hb), dt)
        b["b2"] = _zeros((hb,), dt)
        b["W3"] = _init(rng, hb, (hb, 1), dt, gain=0.1)
        b["b3"] = _zeros((1,), dt)

    # -- feature standardization --------------------------------------------

    def _require_norm(self) -> NormStats:
        if self.norm is None:
            raise ValueError("normalization statistics are missing; fit or load them first")
        return self.norm

    def features(self, cities, states):
        """Standardized features stacked over a batch of same-size cities."""
        norm = self._require_norm()
        raws = [raw_features(c, s) for c, s in zip(cities, states)]
        node = (np.stack([r[0] for r in raws]) - norm.node_mean) / norm.node_std
        edge = (np.stack([r[1] for r in raws]) - norm.edge_mean) / norm.edge_std
        glob = (np.stack([r[2] for r in raws]) - norm.glob_mean) / norm.glob_std
        dt = self.dtype
        return node.astype(dt), edge.astype(dt), glob.astype(dt)

    # -- forward passes -----------------------------------------------------

    def embed(self, node: np.ndarray, edge: np.ndarray) -> Tensor:
        """Node embeddings ``(B, n, d)`` from standardized node and edge features."""
        c, p = self.config, self.params
        bsz, n, _ = node.shape
        h, d = c.n_heads, c.d_model
        dk = d // h
        edge_t = Tensor(edge)
        x = Tensor(node) @ p["in.W"] + p["in.b"]
        scale = 1.0 / np.sqrt(dk)
        for i in range(c.n_layers):
            pre = f"layer{i}."
            z = ad.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            q = (z @ p[pre + "Wq"]).reshape(bsz, n, h, dk).transpose(0, 2, 1, 3)
            k = (z @ p[pre + "Wk"]).reshape(bsz, n, h, dk).transpose(0, 2, 3, 1)
            v = (z @ p[pre + "Wv"]).reshape(bsz, n, h, dk).transpose(0, 2, 1, 3)
            bias = (edge_t @ p[pre + "We"]).transpose(0, 3, 1, 2)
            att = ad.softmax((q @ k) * scale + bias, axis=-1)             # (B, H, n, n)
            msg = (att @ v).transpose(0, 2, 1, 3)                          # (B, n, H, dk)
            agg = att.transpose(0, 2, 1, 3) @ edge_t                       # (B, n, H, ne)
            ev = (agg.reshape(bsz, n, h, 1, edge.shape[-1]) @ p[pre + "Wev"]).reshape(bsz, n, h, dk)
            x = x + (msg + ev).reshape(bsz, n, d) @ p[pre + "Wo"]
            z = ad.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            x = x + (z @ p[pre + "W1"] + p[pre + "b1"]).relu() @ p[pre + "W2"] + p[pre + "b2"]
        y = ad.layer_norm(x, p["out.ln.g"], p["out.ln.b"])
        if not np.all(np.isfinite(y.data)):
            raise TrainingDivergedError("non-finite node embeddings")
        return y

    def ext_log_probs(self, y_flat: Tensor, glob: np.ndarray, batch: CandidateBatch) -> Tensor:
        """Log-probabilities of all candidates, segment-normalized per state."""
        p = self.params
        extra = np.concatenate([batch.extra, glob[batch.owner]], axis=1).astype(self.dtype)
        h1 = (ad.spmm(batch.mean_sel, y_flat @ p["ext.Wmean"])
              + ad.spmm(batch.term_sel, y_flat @ p["ext.Wterm"])
              + Tensor(extra) @ p["ext.Wx"] + p["ext.b1"])
        logits = (h1.relu() @ p["ext.W2"] + p["ext.b2"]).reshape(-1)
        return ad.segment_log_softmax(logits, batch.starts)

    def halt_logits(self, y_flat: Tensor, glob: np.ndarray, route_sel) -> Tensor:
        p = self.params
        r = ad.spmm(route_sel, y_flat)
        h1 = r @ p["halt.Wr"] + Tensor(glob) @ p["halt.Wg"] + p["halt.b1"]
        return (h1.relu() @ p["halt.W2"] + p["halt.b2"]).reshape(-1)

    def baseline(self, descriptors: np.ndarray, alphas: np.ndarray) -> Tensor:
        """Predicted episode return for each (city descriptor, alpha) row."""
        norm, b = self._require_norm(), self.baseline_params
        x = np.concatenate([(np.atleast_2d(descriptors) - norm.desc_mean) / norm.desc_std,
                            np.asarray(alphas, dtype=float).reshape(-1, 1)], axis=1)
        x = Tensor(x.astype(self.dtype))
        h = (x @ b["W1"] + b["b1"]).relu()
        h = (h @ b["W2"] + b["b2"]).relu()
        return (h @ b["W3"] + b["b3"]).reshape(-1)

    # -- single-state Policy protocol ---------------------------------------

    def _embedding(self, city: City, state: MdpState):
        key = (id(city), state.finished, state.current)
        if self._y_cache is None or self._y_cache[0] != key or self._y_cache[1]() is not city:
            with ad.no_grad():
                node, edge, _ = self.features([city], [state])
                y = self.embed(node, edge).data[0]
            self._y_cache = (key, weakref.ref(city), y)
        _, _, glob = self.features([city], [state])
        return self._y_cache[2], glob

    def action_probs(self, city: City, state: MdpState, actions) -> np.ndarray:
        y, glob = self._embedding(city, state)
        with ad.no_grad():
            if state.extension_pending:
                cat = path_catalog(city)
                k, prepend = cat.candidates(state.current, state.params.max_stops)
                if len(k) != len(actions):
                    raise ValueError("actions do not match the legal extension set")
                batch = CandidateBatch.build([(cat, state, k, prepend)], city.n, self.dtype)
                return np.exp(self.ext_log_probs(Tensor(y), glob, batch).data)
            if len(actions) == 1:
                # a forced halt or continue: the masked distribution is a point mass
                return np.ones(1)
            p_halt = self.halt_probability(city, state, _cached=(y, glob))
        return np.array([p_halt if a == HALT else 1.0 - p_halt for a in actions])

    def halt_probability(self, city: City, state: MdpState, _cached=None) -> float:
        """Unmasked probability of finishing the current route."""
        y, glob = _cached or self._embedding(city, state)
        with ad.no_grad():
            sel = route_selector([state.current], city.n, self.dtype)
            z = self.halt_logits(Tensor(y), glob, sel).data[0]
        return float(np.exp(-np.logaddexp(0.0, -z)))

    # -- batched rollouts ---------------------------------------------------

    def rollout(self, cities, params, alphas, rngs, *, greedy: bool = False, starts=None,
                record: bool = False, beta: float = 5.0, transfer_penalty: float = 300.0,
                with_cost: bool = True):
        """Run one episode per city in lockstep and return the episodes.

        ``params`` and ``alphas`` may be single values or per-city lists;
        ``rngs`` is a list of per-episode generators (ignored when greedy).
        ``starts`` optionally gives each episode's already finished routes.
        With ``record`` each episode also carries ``groups`` for gradient replay.
        """
        count = len(cities)
        params = params if isinstance(params, (list, tuple)) else [params] * count
        alphas = np.broadcast_to(np.asarray(alphas, dtype=float), (count,))
        rngs = rngs if rngs is not None else [None] * count
        starts = starts if starts is not None else [()] * count
        jobs = [_Job(c, init_state(c, p, a, f), r) for c, p, a, r, f
                in zip(cities, params, alphas, rngs, starts)]
        by_size: dict[int, list[_Job]] = {}
        for job in jobs:
            by_size.setdefault(job.city.n, []).append(job)
        for group in by_size.values():
            self._run_lockstep(group, greedy)
        episodes = []
        for job in jobs:
            ep = Episode(job.state.finished, job.decisions)
            if with_cost:
                ep.cost = total_cost(job.city, ep.routes, job.state.params,
                                     CostWeights(job.state.alpha, beta, transfer_penalty))
            if record:
                ep.groups = job.groups
            episodes.append(ep)
        return episodes

    def _ensure_embeddings(self, jobs):
        stale = [j for j in jobs if j.y_key != (j.state.finished, j.state.current)]
        if stale:
            with ad.no_grad():
                node, edge, _ = self.features([j.city for j in stale], [j.state for j in stale])
                y = self.embed(node, edge).data
            for j, row in zip(stale, y):
                j.y = row
                j.y_key = (j.state.finished, j.state.current)
                j.groups.append(_Group(j.state))

    def _run_lockstep(self, jobs, greedy):
        n = jobs[0].city.n
        while True:
            active = [j for j in jobs if not j.state.terminal]
            if not active:
                return
            if active[0].state.extension_pending:
                for j in active:
                    if j.cands is None:
                        j.cands = j.catalog.candidates(j.state.current, j.state.params.max_stops)
                choice = [j for j in active if len(j.cands[0]) > 1]
                self._ensure_embeddings(choice)
                probs = {}
                for chunk in _chunks(choice, lambda j: len(j.cands[0]), CANDIDATE_BUDGET):
                    batch = CandidateBatch.build(
                        [(j.catalog, j.state, *j.cands) for j in chunk], n, self.dtype)
                    glob = self.features([j.city for j in chunk], [j.state for j in chunk])[2]
                    y = np.concatenate([j.y for j in chunk]).astype(self.dtype)
                    with ad.no_grad():
                        logp = self.ext_log_probs(Tensor(y), glob, batch).data
                    for idx, j in enumerate(chunk):
                        probs[id(j)] = np.exp(logp[batch.starts[idx]:batch.starts[idx] + len(j.cands[0])])
                for j in active:
                    k, prepend = j.cands
                    if len(k) == 1:
                        idx, logp = 0, 0.0
                    else:
                        pr = probs[id(j)]
                        idx = choose(pr, j.rng, greedy)
                        logp = float(np.log(pr[idx]))
                        j.groups[-1].ext = (k, prepend, idx)
                    j.decisions.append(Decision(j.state.t, "ext", j.state, len(k), idx, logp))
                    action = ExtensionAction(j.catalog.paths[k[idx]], FRONT if prepend[idx] else BACK)
                    j.advance(current=action.apply(j.state.current))
            else:
                legal = {}
                for j in active:
                    j.cands = j.catalog.candidates(j.state.current, j.state.params.max_stops)
                    m, p = len(j.state.current), j.state.params
                    if m >= p.max_stops or len(j.cands[0]) == 0:
                        legal[id(j)] = [HALT]
                    elif m < p.min_stops:
                        legal[id(j)] = [CONTINUE]
                    else:
                        legal[id(j)] = [CONTINUE, HALT]
                choice = [j for j in active if len(legal[id(j)]) == 2]
                p_halt = {}
                if choice:
                    self._ensure_embeddings(choice)
                    glob = self.features([j.city for j in choice], [j.state for j in choice])[2]
                    y = np.concatenate([j.y for j in choice]).astype(self.dtype)
                    sel = route_selector([j.state.current for j in choice], n, self.dtype)
                    with ad.no_grad():
                        z = self.halt_logits(Tensor(y), glob, sel).data
                    for j, zz in zip(choice, z):
                        p_halt[id(j)] = float(np.exp(-np.logaddexp(0.0, -zz)))
                for j in active:
                    actions = legal[id(j)]
                    if len(actions) == 1:
                        idx, logp = 0, 0.0
                    else:
                        ph = p_halt[id(j)]
                        pr = np.array([1.0 - ph, ph])
                        idx = choose(pr, j.rng, greedy)
                        logp = float(np.log(pr[idx]))
                        j.groups[-1].halt = actions[idx] == HALT
                    j.decisions.append(Decision(j.state.t, "halt", j.state, len(actions), idx, logp))
                    if actions[idx] == HALT:
                        j.advance(finished=j.state.finished + (j.state.current,), current=())
                    else:
                        j.advance(keep_candidates=True)

    # -- gradient replay ----------------------------------------------------

    def replay_log_prob(self, episodes_groups, cities, weights) -> float:
        """Backpropagate ``-sum_e weights[e] * sum_t log pi(a_t|s_t)``.

        ``episodes_groups[e]`` is the ``groups`` list recorded by
        :meth:`rollout`. Gradients accumulate into ``self.params``. Returns the
        summed weighted log-probability (the negative loss).
        """
        total = 0.0
        depth = max((len(g) for g in episodes_groups), default=0)
        for pos in range(depth):
            members = [(e, g[pos]) for e, g in enumerate(episodes_groups) if pos < len(g)]
            by_size: dict[int, list] = {}
            for e, grp in members:
                by_size.setdefault(cities[e].n, []).append((e, grp))
            for n, items in by_size.items():
                total += self._replay_items(items, cities, weights, n)
        return total

    def _replay_items(self, items, cities, weights, n):
        states = [grp.state for _, grp in items]
        node, edge, glob = self.features([cities[e] for e, _ in items], states)
        y_flat = self.embed(node, edge).reshape(len(items) * n, -1)
        terms = []
        halt_rows = [i for i, (_, g) in enumerate(items) if g.halt is not None]
        if halt_rows:
            sel = route_selector([states[i].current for i in halt_rows], n, self.dtype,
                                 slots=halt_rows, blocks=len(items))
            z = self.halt_logits(y_flat, glob[halt_rows], sel)
            sign = np.array([1.0 if items[i][1].halt else -1.0 for i in halt_rows], dtype=self.dtype)
            w = np.array([weights[items[i][0]] for i in halt_rows], dtype=self.dtype)
            # log sigmoid(sign * z)
            terms.append((-((z * (-sign)).softplus()) * w).sum())
        ext_rows = [i for i, (_, g) in enumerate(items) if g.ext is not None]
        if ext_rows:
            specs = []
            for i in ext_rows:
                e, g = items[i]
                specs.append((path_catalog(cities[e]), states[i], g.ext[0], g.ext[1]))
            batch = CandidateBatch.build(specs, n, self.dtype, slots=ext_rows, blocks=len(items))
            logp = self.ext_log_probs(y_flat, glob[ext_rows], batch)
            picks = np.array([batch.starts[r] + items[i][1].ext[2] for r, i in enumerate(ext_rows)])
            w = np.array([weights[items[i][0]] for i in ext_rows], dtype=self.dtype)
            terms.append((logp[picks] * w).sum())
        objective = terms[0] if len(terms) == 1 else terms[0] + terms[1]
        (-objective).backward()
        return float(objective.data)

    # -- persistence --------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"policy/{k}": v.data for k, v in self.params.items()}
        out.update({f"baseline/{k}": v.data for k, v in self.baseline_params.items()})
        if self.norm is not None:
            out.update({f"norm/{k}": v for k, v in self.norm.arrays().items()})
        return out

    def copy(self) -> PolicyNet:
        other = PolicyNet(self.config, self.norm)
        for k, v in self.params.items():
            other.params[k].data = v.data.copy()
        for k, v in self.baseline_params.items():
            other.baseline_params[k].data = v.data.copy()
        return other


@dataclass
class _Group:
    """Decisions that share one backbone evaluation (same finished/current)."""

    state: MdpState
    halt: bool | None = None
    ext: tuple | None = None


class _Job:
    __slots__ = ("city", "catalog", "state", "rng", "decisions", "groups", "y", "y_key", "cands")

    def __init__(self, city, state, rng):
        self.city = city
        self.catalog = path_catalog(city)
        self.state = state
        self.rng = rng
        self.decisions = []
        self.groups = []
        self.y = None
        self.y_key = None
        self.cands = None

    def advance(self, finished=None, current=None, keep_candidates=False):
        s = self.state
        self.state = MdpState(s.finished if finished is None else finished,
                              s.current if current is None else current, s.t + 1, s.params, s.alpha)
        if not keep_candidates:
            self.cands = None


def _chunks(items, size_of, budget):
    chunk, total = [], 0
    for it in items:
        s = size_of(it)
        if chunk and total + s > budget:
            yield chunk
            chunk, total = [], 0
        chunk.append(it)
        total += s
    if chunk:
        yield chunk


def route_selector(routes, n, dtype, slots=None, blocks=None):
    """Sparse rows averaging the embeddings of each route's nodes.

    Row ``r`` reads from block ``slots[r]`` (default ``r``) of a flattened
    ``(B * n, d)`` embedding matrix with ``B = blocks``.
    """
    slots = range(len(routes)) if slots is None else slots
    rows, cols, vals = [], [], []
    for r, (route, slot) in enumerate(zip(routes, slots)):
        rows += [r] * len(route)
        cols += [slot * n + v for v in route]
        vals += [1.0 / len(route)] * len(route)
    width = n * (blocks if blocks is not None else len(routes))
    return csr_matrix((np.array(vals, dtype=dtype), (rows, cols)), shape=(len(routes), width))


@dataclass
class CandidateBatch:
    """Sparse selectors and scalar features for a flat list of candidates."""

    mean_sel: csr_matrix
    term_sel: csr_matrix
    extra: np.ndarray
    owner: np.ndarray
    starts: np.ndarray
    counts: np.ndarray = field(default=None)

    @classmethod
    def build(cls, specs, n, dtype, slots=None, blocks=None) -> CandidateBatch:
        """``specs`` holds ``(catalog, state, path_indices, prepend_flags)`` per state."""
        slots = range(len(specs)) if slots is None else slots
        counts = np.array([len(s[2]) for s in specs])
        starts = np.cumsum(counts) - counts
        total = int(counts.sum())
        m_rows, m_cols, m_vals = [], [], []
        t_rows, t_cols = [], []
        extra = np.zeros((total, 2))
        owner = np.repeat(np.arange(len(specs)), counts)
        for (cat, state, k, prepend), slot, start in zip(specs, slots, starts):
            nodes, pos = cat.nodes_of(k)
            lengths = cat.length[k]
            m_rows.append(start + pos)
            m_cols.append(slot * n + nodes)
            m_vals.append(1.0 / lengths[pos])
            cur = state.current
            if cur:
                t_rows.append(start + np.arange(len(k)))
                t_cols.append(slot * n + np.where(prepend, cur[0], cur[-1]))
            extra[start:start + len(k), 0] = lengths / state.params.max_stops
            extra[start:start + len(k), 1] = prepend
        width = n * (blocks if blocks is not None else len(specs))
        mean_sel = csr_matrix((np.concatenate(m_vals).astype(dtype),
                               (np.concatenate(m_rows), np.concatenate(m_cols))),
                              shape=(total, width))
        if t_rows:
            tr, tc = np.concatenate(t_rows), np.concatenate(t_cols)
            term_sel = csr_matrix((np.ones(len(tr), dtype=dtype), (tr, tc)), shape=(total, width))
        else:
            term_sel = csr_matrix((total, width), dtype=dtype)
        return cls(mean_sel, term_sel, extra, owner, starts, counts)


# -- checkpoints ------------------------------------------------------------

def save_params(net: PolicyNet, path) -> None:
    """Write parameters, normalization statistics and config to ``path`` (npz)."""
    meta = {"version": CHECKPOINT_VERSION, "feature_layout": FEATURE_LAYOUT_VERSION,
            "config": asdict(net.config), "has_norm": net.norm is not None}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **net.state_arrays())


def load_params(path) -> PolicyNet:
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (zipfile.BadZipFile, OSError, ValueError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "meta" not in arrays:
        raise CheckpointError(f"{path} has no metadata record")
    meta = json.loads(str(arrays.pop("meta")))
    if meta.get("version") != CHECKPOINT_VERSION or meta.get("feature_layout") != FEATURE_LAYOUT_VERSION:
        raise CheckpointError(
            f"checkpoint version {meta.get('version')}/{meta.get('feature_layout')} is not supported "
            f"(expected {CHECKPOINT_VERSION}/{FEATURE_LAYOUT_VERSION})")
    norm = None
    if meta.get("has_norm"):
        norm = NormStats(**{k[5:]: arrays[k] for k in arrays if k.startswith("norm/")})
    net = PolicyNet(PolicyConfig(**meta["config"]), norm)
    for store, prefix in ((net.params, "policy/"), (net.baseline_params, "baseline/")):
        for k in store:
            if prefix + k not in arrays:
                raise CheckpointError(f"checkpoint is missing {prefix + k}")
            store[k].data = arrays[prefix + k]
    return net

