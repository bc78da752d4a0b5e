import numpy as np
import pytest
from conftest import path_graph

from tndp import autodiff as ad
from tndp.autodiff import Tensor
from tndp.city import NdpParams, generate_city
from tndp.errors import CheckpointError
from tndp.mdp import (CONTINUE, HALT, ExtensionAction, MdpState, RandomPolicy, apply_action,
                      enumerate_extensions, halt_actions, init_state, legal_actions, rollout)
from tndp.policy import (NODE_FEATURES, EDGE_FEATURES, CandidateBatch, NormStats, PolicyConfig,
                         PolicyNet, descriptor, load_params, raw_features, save_params)
from tndp.training import fit_normalization

TINY = PolicyConfig(n_layers=2, n_heads=2, d_model=8, d_ff=16, head_hidden=8, baseline_hidden=8)
EDGE = {name: k for k, name in enumerate(EDGE_FEATURES)}


def tiny_net(cities, params, seed=0, config=TINY):
    norm = fit_normalization(cities, params, np.random.default_rng(seed), min_rows=200)
    return PolicyNet(config, norm, seed=seed)


def walk_to_state(city, params, rng, steps):
    """A reachable state after ``steps`` random legal actions."""
    s = init_state(city, params, float(rng.random()))
    for _ in range(steps):
        acts = legal_actions(city, s)
        if s.terminal or not acts:
            break
        nxt = apply_action(city, s, acts[int(rng.integers(len(acts)))])
        if nxt.terminal:
            break
        s = nxt
    return s


@pytest.fixture(scope="module")
def small():
    params = NdpParams(3, 2, 6)
    cities = [generate_city("4nn", 9, 0.0, np.random.default_rng(k)) for k in range(4)]
    return cities, params, tiny_net(cities, params)


class TestFeatures:
    def test_empty_network_has_no_transit_flags(self, mandl_like):
        s = init_state(mandl_like, NdpParams(6, 2, 8), 0.5)
        node, edge, glob = raw_features(mandl_like, s)
        assert node.shape == (15, len(NODE_FEATURES))
        assert not edge[..., EDGE["direct_transit"]].any()
        assert not edge[..., EDGE["adjacent_in_current"]].any()
        np.testing.assert_array_equal(glob, [0.5, 0.0, 0.0])

    def test_finished_route_sets_direct_transit(self):
        city = path_graph(4)
        s = MdpState(((0, 1, 2),), (), 5, NdpParams(2, 2, 4), 1.0)
        _, edge, _ = raw_features(city, s)
        flag = edge[..., EDGE["direct_transit"]]
        assert flag[0, 1] == flag[1, 2] == flag[2, 1] == 1.0
        assert flag[2, 3] == 0.0

    def test_current_route_flags(self):
        city = path_graph(4)
        s = MdpState((), (1, 2), 2, NdpParams(2, 2, 4), 1.0)
        node, edge, glob = raw_features(city, s)
        np.testing.assert_array_equal(node[:, 4], [0, 1, 1, 0])
        np.testing.assert_array_equal(node[:, 5], [0, 1, 1, 0])
        assert edge[1, 2, EDGE["adjacent_in_current"]] == edge[2, 1, EDGE["adjacent_in_current"]] == 1
        assert glob[2] == pytest.approx(0.5)

    def test_standardized_moments(self):
        params = NdpParams(3, 2, 6)
        cities = [generate_city("8grid", 12, 0.1, np.random.default_rng(k)) for k in range(200)]
        norm = fit_normalization(cities, params, np.random.default_rng(0), min_rows=30000)
        # an independent sample from the same process, standardized with the first one's moments
        fresh = fit_normalization(cities, params, np.random.default_rng(1), min_rows=30000)
        varying = norm.node_std > 1e-6
        mean = (fresh.node_mean - norm.node_mean) / norm.node_std
        std = fresh.node_std / norm.node_std
        assert np.all(np.abs(mean[varying]) < 0.1)
        assert np.all((std[varying] > 0.9) & (std[varying] < 1.1))


class TestBackbone:
    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_equivariance(self, small, seed):
        cities, params, net = small
        rng = np.random.default_rng(seed)
        city = cities[seed % len(cities)]
        s = walk_to_state(city, params, rng, 6)
        perm = rng.permutation(city.n)
        inv = np.argsort(perm)
        moved = city.permuted(perm)
        s2 = MdpState(tuple(tuple(int(inv[v]) for v in r) for r in s.finished),
                      tuple(int(inv[v]) for v in s.current), s.t, s.params, s.alpha)
        with ad.no_grad():
            y = net.embed(*net.features([city], [s])[:2]).data[0]
            y2 = net.embed(*net.features([moved], [s2])[:2]).data[0]
        np.testing.assert_allclose(y2, y[perm], atol=1e-9)

    def test_zero_weights_give_constant_embeddings(self, small):
        cities, params, net = small
        net = net.copy()
        rng = np.random.default_rng(0)
        for name, p in net.params.items():
            p.data = np.zeros_like(p.data) if ".W" in name or name.startswith("W") \
                else rng.standard_normal(p.data.shape)
        s = walk_to_state(cities[0], params, rng, 4)
        y = net.embed(*net.features([cities[0]], [s])[:2]).data[0]
        np.testing.assert_allclose(y, np.broadcast_to(y[0], y.shape), atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_on_random_inputs(self, small, seed):
        _, _, net = small
        rng = np.random.default_rng(seed)
        node = rng.standard_normal((2, 7, len(NODE_FEATURES))) * 5
        edge = rng.standard_normal((2, 7, 7, len(EDGE_FEATURES))) * 5
        with ad.no_grad():
            assert np.all(np.isfinite(net.embed(node, edge).data))


class TestHeads:
    def test_probabilities_sum_to_one(self, small):
        cities, params, net = small
        rng = np.random.default_rng(3)
        for k in range(20):
            city = cities[k % len(cities)]
            s = walk_to_state(city, params, rng, int(rng.integers(0, 10)))
            acts = legal_actions(city, s)
            if not acts:
                continue
            p = net.action_probs(city, s, acts)
            assert np.all((p >= 0) & (p <= 1))
            assert p.sum() == pytest.approx(1.0, abs=1e-6)

    def test_single_candidate_is_certain(self):
        city = path_graph(3)
        params = NdpParams(1, 2, 3)
        net = tiny_net([city], params)
        s = MdpState((), (0, 1), 1, params, 0.5)
        acts = enumerate_extensions(city, s)
        assert acts == [ExtensionAction((2,), "back")] or len(acts) == 1
        assert net.action_probs(city, s, acts)[0] == 1.0

    def test_duplicated_candidates_get_equal_probability(self, small):
        cities, params, net = small
        city = cities[0]
        s = walk_to_state(city, params, np.random.default_rng(1), 0)
        from tndp.mdp import path_catalog
        cat = path_catalog(city)
        k, prepend = cat.candidates(s.current, params.max_stops)
        k2, prepend2 = np.concatenate([k, k]), np.concatenate([prepend, prepend])
        y, glob = net._embedding(city, s)
        batch = CandidateBatch.build([(cat, s, k2, prepend2)], city.n, net.dtype)
        with ad.no_grad():
            p = np.exp(net.ext_log_probs(Tensor(y), glob, batch).data)
        np.testing.assert_allclose(p[:len(k)], p[len(k):], rtol=1e-12)
        assert p.sum() == pytest.approx(1.0)

    def test_halt_masking(self):
        city = path_graph(5)
        params = NdpParams(1, 3, 4)
        net = tiny_net([city], params)
        short = MdpState((), (0, 1), 2, params, 0.5)
        full = MdpState((), (0, 1, 2, 3), 2, params, 0.5)
        free = MdpState((), (0, 1, 2), 2, params, 0.5)
        assert halt_actions(city, short) == [CONTINUE]
        assert net.action_probs(city, short, [CONTINUE])[0] == 1.0
        assert net.action_probs(city, full, [HALT])[0] == 1.0
        assert 0.0 < net.halt_probability(city, free) < 1.0

    def test_baseline_deterministic_and_finite(self, small):
        cities, params, net = small
        descs = np.stack([descriptor(c, params) for c in cities])
        alphas = np.linspace(0, 1, len(cities))
        a = net.baseline(descs, alphas).data
        b = net.baseline(descs, alphas).data
        np.testing.assert_array_equal(a, b)
        assert np.all(np.isfinite(a))
        wild = descs * np.random.default_rng(0).uniform(-50, 50, descs.shape)
        assert np.all(np.isfinite(net.baseline(wild, alphas).data))


class TestRollout:
    def test_batched_rollout_matches_reference_rollout(self, small):
        cities, params, net = small
        eps = net.rollout(cities, params, 0.3, [np.random.default_rng(k) for k in range(4)])
        for k, (city, ep) in enumerate(zip(cities, eps)):
            ref = rollout(city, net, params, 0.3, np.random.default_rng(k))
            assert ref.routes == ep.routes
            assert ref.log_prob == pytest.approx(ep.log_prob, abs=1e-9)

    def test_replay_reproduces_rollout_log_probs(self, small):
        cities, params, net = small
        net = net.copy()
        eps = net.rollout(cities, params, [0.0, 0.4, 0.7, 1.0],
                          [np.random.default_rng(k) for k in range(4)], record=True)
        for k, ep in enumerate(eps):
            weights = np.zeros(len(eps))
            weights[k] = 1.0
            replay = net.replay_log_prob([e.groups for e in eps], cities, weights)
            assert replay == pytest.approx(ep.log_prob, abs=1e-9)

    def test_greedy_rollout_is_deterministic(self, small):
        cities, params, net = small
        a = net.rollout(cities, params, 0.5, None, greedy=True)
        b = net.rollout(cities, params, 0.5, None, greedy=True)
        assert [e.routes for e in a] == [e.routes for e in b]


def test_log_policy_gradient_matches_finite_differences():
    city = generate_city("4nn", 5, 0.0, np.random.default_rng(2))
    params = NdpParams(2, 2, 4)
    net = tiny_net([city], params, seed=1)
    ep = net.rollout([city], params, 0.5, [np.random.default_rng(0)], record=True)[0]
    assert {d.kind for d in ep.decisions} == {"ext", "halt"}
    groups = [ep.groups]

    for p in net.params.values():
        p.grad = None
    net.replay_log_prob(groups, [city], [1.0])
    # replay backpropagates the negative objective
    analytic = {k: -p.grad.copy() for k, p in net.params.items()}

    eps = 1e-5
    for name, p in net.params.items():
        numeric = np.zeros_like(p.data)
        flat, out = p.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = net.replay_log_prob(groups, [city], [1.0])
            flat[i] = old - eps
            lo = net.replay_log_prob(groups, [city], [1.0])
            flat[i] = old
            out[i] = (hi - lo) / (2 * eps)
        # parameters the objective cannot depend on (a bias shared by every
        # candidate logit) have an analytic gradient of exactly zero; the floor
        # keeps finite-difference round-off (about 1e-11) from counting as error
        scale = max(np.linalg.norm(analytic[name]), np.linalg.norm(numeric), 1e-6)
        rel = np.linalg.norm(analytic[name] - numeric) / scale
        assert rel < 1e-4, f"{name}: relative error {rel:.2e}"


class TestCheckpoints:
    def test_round_trip_is_bitwise(self, small, tmp_path):
        _, _, net = small
        save_params(net, tmp_path / "p.npz")
        other = load_params(tmp_path / "p.npz")
        assert other.config == net.config
        for store, ref in ((other.params, net.params), (other.baseline_params, net.baseline_params)):
            assert store.keys() == ref.keys()
            for k in store:
                assert store[k].data.dtype == ref[k].data.dtype
                np.testing.assert_array_equal(store[k].data, ref[k].data)
        for k, v in net.norm.arrays().items():
            np.testing.assert_array_equal(other.norm.arrays()[k], v)

    def test_truncated_file(self, small, tmp_path):
        _, _, net = small
        save_params(net, tmp_path / "p.npz")
        raw = (tmp_path / "p.npz").read_bytes()
        (tmp_path / "cut.npz").write_bytes(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_params(tmp_path / "cut.npz")

    def test_old_version_is_refused(self, small, tmp_path, monkeypatch):
        _, _, net = small
        import tndp.policy as policy
        monkeypatch.setattr(policy, "CHECKPOINT_VERSION", 0)
        save_params(net, tmp_path / "old.npz")
        monkeypatch.undo()
        with pytest.raises(CheckpointError, match="version"):
            load_params(tmp_path / "old.npz")

    def test_missing_norm_is_reported(self):
        net = PolicyNet(TINY, None)
        with pytest.raises(ValueError, match="normalization"):
            net.features([path_graph(3)], [init_state(path_graph(3), NdpParams(1, 2, 3), 0.0)])


def test_identity_norm_shapes():
    norm = NormStats.identity()
    assert norm.node_mean.shape == (len(NODE_FEATURES),)
    assert np.all(norm.edge_std == 1.0)


def test_random_policy_states_are_reachable(small):
    # sanity check of the helper used throughout this module
    cities, params, _ = small
    s = walk_to_state(cities[0], params, np.random.default_rng(0), 5)
    assert not s.terminal
    assert isinstance(RandomPolicy().action_probs(cities[0], s, legal_actions(cities[0], s)), np.ndarray)
