"""REINFORCE-with-baseline training of the construction policy on synthetic cities."""

from __future__ import annotations

import csv
import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .city import CITY_KINDS, City, NdpParams, augment, generate_city
from .errors import TrainingDivergedError
from .mdp import RandomPolicy, init_state, run_episode
from .policy import NormStats, PolicyConfig, PolicyNet, descriptor, raw_features, save_params
from .streams import stream

log = logging.getLogger(__name__)

VALIDATION_ALPHAS = (0.0, 0.5, 1.0)
HISTORY_COLUMNS = ("epoch", "train_cost_mean", "val_cost_mean", "val_cost_alpha0",
                   "val_cost_alpha05", "val_cost_alpha1", "wall_seconds")
PATIENCE = 3


@dataclass
class TrainConfig:
    dataset_size: int = 2 ** 15
    n_nodes: int = 20
    batch_size: int = 64
    epochs: int = 5
    n_routes: int = 10
    min_stops: int = 2
    max_stops: int = 15
    lr_policy: float = 1e-4
    lr_baseline: float = 1e-3
    beta: float = 5.0
    transfer_penalty: float = 300.0
    deletion_prob: float = 0.1
    grad_clip: float = 1.0
    norm_rows: int = 2000
    seed: int = 0
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    @property
    def params(self) -> NdpParams:
        return NdpParams(self.n_routes, self.min_stops, self.max_stops)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        """Build from a flat mapping; policy fields may appear at top level."""
        doc = dict(doc)
        policy_keys = PolicyConfig.__dataclass_fields__.keys()
        nested = dict(doc.pop("policy", {}) or {})
        nested.update({k: doc.pop(k) for k in list(doc) if k in policy_keys})
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(policy=PolicyConfig(**nested), **doc)


def _exact_city(kind: str, n: int, rho: float, rng: np.random.Generator) -> City:
    # the voronoi generator may settle for n +- 2 nodes; draw again until exact
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        while True:
            city = generate_city(kind, n, rho, rng)
            if city.n == n:
                return city


def build_dataset(count: int, n: int, seed: int, deletion_prob: float = 0.1) -> list[City]:
    """``count`` synthetic cities of ``n`` nodes, kinds drawn uniformly.

    City ``i`` depends only on ``(seed, i)``. The last tenth is the validation
    split (see :func:`split_dataset`).
    """
    if count < 10:
        raise ValueError("dataset needs at least 10 cities")
    return [_exact_city(kind, n, deletion_prob, stream(seed, "city", i))
            for i, kind in enumerate(dataset_kinds(count, seed))]


def dataset_kinds(count: int, seed: int) -> list[str]:
    """Generator kind of each dataset city (uniform over the four kinds)."""
    return [CITY_KINDS[k] for k in stream(seed, "kinds").integers(len(CITY_KINDS), size=count)]


def split_dataset(cities: list[City]) -> tuple[list[City], list[City]]:
    cut = len(cities) - len(cities) // 10
    return cities[:cut], cities[cut:]


def fit_normalization(cities, params: NdpParams, rng: np.random.Generator,
                      min_rows: int = 1000) -> NormStats:
    """Feature moments over states visited by random-policy rollouts.

    Cities are augmented and given a random alpha first, matching what the
    policy sees during training. Sampling continues (cycling over ``cities``)
    until at least ``min_rows`` node-feature rows are collected.
    """
    nodes, edges, globs, descs = [], [], [], []
    rows, i = 0, 0
    policy = RandomPolicy()
    while rows < min_rows:
        city = augment(cities[i % len(cities)], rng)
        alpha = rng.random()
        episode = run_episode(city, policy, init_state(city, params, alpha), rng)
        for d in episode.decisions:
            node, edge, glob = raw_features(city, d.state)
            nodes.append(node)
            edges.append(edge.reshape(-1, edge.shape[-1]))
            globs.append(glob)
            rows += len(node)
        descs.append(descriptor(city, params))
        i += 1

    def moments(parts):
        x = np.concatenate([np.atleast_2d(p) for p in parts])
        return x.mean(axis=0), np.maximum(x.std(axis=0), 1e-6)

    return NormStats(*moments(nodes), *moments(edges), *moments(globs), *moments(descs))


@dataclass
class ValidationResult:
    mean: float
    per_alpha: dict[float, float]


def validate(net: PolicyNet, cities, params: NdpParams, alphas=VALIDATION_ALPHAS,
             beta: float = 5.0, transfer_penalty: float = 300.0) -> ValidationResult:
    """Mean cost of greedy rollouts over every (city, alpha) pair."""
    if not cities:
        raise ValueError("validation needs at least one city")
    per_alpha = {}
    for a in alphas:
        eps = net.rollout(cities, params, a, None, greedy=True, beta=beta,
                          transfer_penalty=transfer_penalty)
        per_alpha[float(a)] = float(np.mean([e.cost.total for e in eps]))
    return ValidationResult(float(np.mean(list(per_alpha.values()))), per_alpha)


@dataclass
class TrainResult:
    net: PolicyNet
    history: list[dict]
    best_epoch: int
    initial_validation: ValidationResult


def reinforce_step(net: PolicyNet, policy_opt: ad.Adam, baseline_opt: ad.Adam, cities, params,
                   alphas, rngs, *, beta: float, transfer_penalty: float, grad_clip: float):
    """One REINFORCE-with-baseline update; returns the batch's episodes."""
    episodes = net.rollout(cities, params, alphas, rngs, record=True, beta=beta,
                           transfer_penalty=transfer_penalty)
    returns = np.array([e.reward for e in episodes])
    descs = np.stack([descriptor(c, params) for c in cities])

    baseline_opt.zero_grad()
    b = net.baseline(descs, alphas)
    err = b - returns.astype(net.dtype)
    loss_b = (err * err).mean()
    if not np.isfinite(loss_b.data):
        raise TrainingDivergedError(f"baseline loss is {loss_b.data}")
    loss_b.backward()
    ad.clip_grad_norm(baseline_opt.params, grad_clip)
    baseline_opt.step()

    policy_opt.zero_grad()
    advantage = returns - b.data.astype(np.float64)
    weights = advantage / len(episodes)
    objective = net.replay_log_prob([e.groups for e in episodes], cities, weights)
    if not np.isfinite(objective):
        raise TrainingDivergedError(f"policy objective is {objective}; advantages {advantage}")
    ad.clip_grad_norm(policy_opt.params, grad_clip)
    policy_opt.step()
    return episodes


def _write_history(path: Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(history)


def train(config: TrainConfig, out_dir=None, dataset: list[City] | None = None) -> TrainResult:
    """Train a policy and return the parameters of the best validation epoch.

    With ``out_dir`` set, writes ``history.csv``, one checkpoint per epoch
    (``epoch_<k>.npz``), ``best.npz`` and a ``best.json`` marker.
    """
    seed = config.seed
    params = config.params
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    cities = dataset if dataset is not None else build_dataset(
        config.dataset_size, config.n_nodes, seed, config.deletion_prob)
    train_set, val_set = split_dataset(cities)

    norm = fit_normalization(train_set, params, stream(seed, "normalization"), config.norm_rows)
    net = PolicyNet(config.policy, norm, seed=int(stream(seed, "init").integers(2 ** 31)))
    policy_opt = ad.Adam(net.params, lr=config.lr_policy)
    baseline_opt = ad.Adam(net.baseline_params, lr=config.lr_baseline)
    costs = dict(beta=config.beta, transfer_penalty=config.transfer_penalty)

    initial = validate(net, val_set, params, **costs)
    log.info("untrained validation cost %.4f", initial.mean)
    best = (initial.mean, 0, net.copy())
    history: list[dict] = []
    worse_streak, prev_val = 0, initial.mean
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = stream(seed, "shuffle", epoch).permutation(len(train_set))
        aug_rng = stream(seed, "augment", epoch)
        train_costs = []
        for b0 in range(0, len(order), config.batch_size):
            idx = order[b0:b0 + config.batch_size]
            batch = [augment(train_set[i], aug_rng) for i in idx]
            alphas = aug_rng.random(len(batch))
            rngs = [stream(seed, "rollout", epoch, int(i)) for i in idx]
            episodes = reinforce_step(net, policy_opt, baseline_opt, batch, params, alphas, rngs,
                                      grad_clip=config.grad_clip, **costs)
            train_costs.extend(e.cost.total for e in episodes)
        val = validate(net, val_set, params, **costs)
        row = {
            "epoch": epoch,
            "train_cost_mean": float(np.mean(train_costs)),
            "val_cost_mean": val.mean,
            "val_cost_alpha0": val.per_alpha.get(0.0),
            "val_cost_alpha05": val.per_alpha.get(0.5),
            "val_cost_alpha1": val.per_alpha.get(1.0),
            "wall_seconds": time.perf_counter() - start,
        }
        history.append(row)
        log.info("epoch %d: train %.4f val %.4f", epoch, row["train_cost_mean"], val.mean)
        if val.mean < best[0]:
            best = (val.mean, epoch, net.copy())
        if out is not None:
            save_params(net, out / f"epoch_{epoch}.npz")
            _write_history(out / "history.csv", history)
        worse_streak = worse_streak + 1 if val.mean > prev_val else 0
        prev_val = val.mean
        if worse_streak >= PATIENCE:
            log.warning("validation cost rose %d epochs in a row; stopping early", PATIENCE)
            break

    best_val, best_epoch, best_net = best
    if out is not None:
        save_params(best_net, out / "best.npz")
        (out / "best.json").write_text(json.dumps(
            {"epoch": best_epoch, "val_cost_mean": best_val,
             "checkpoint": "best.npz", "config": config.to_dict()}, indent=2))
    return TrainResult(best_net, history, best_epoch, initial)
