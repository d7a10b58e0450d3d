import itertools
import math

import numpy as np
import pytest

from plmarl import autodiff as ad
from plmarl import nn
from plmarl import plackett_luce as pl
from plmarl.gradcheck import max_rel_error, numeric_grad
from plmarl.policy import (
    ModelConfig,
    OrderingStrategy,
    Policy,
    decode_infer,
    decode_train,
    encode,
    init_params,
    pl_log_prob_op,
    score_credits,
    select_order,
)


def perturbed_params(cfg, seed, scale=0.3):
    """Random parameters with the small output gains lifted, so tests see non-trivial outputs."""
    store = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1000)
    for k, v in store.params.items():
        v += rng.normal(scale=scale, size=v.shape)
    return store


@pytest.fixture
def cfg3():
    return ModelConfig(n_agents=3, obs_dim=4, n_actions=3, d_model=8, n_heads=2, n_blocks=1)


class TestEncode:
    def test_shapes(self, cfg3):
        store = init_params(cfg3, 0)
        obs = np.random.default_rng(0).normal(size=(5, 3, 4))
        reps, values = encode(store, obs, cfg3)
        assert reps.shape == (5, 3, 8) and values.shape == (5, 3)
        reps1, values1 = encode(store, obs[0], cfg3)
        assert reps1.shape == (3, 8) and values1.shape == (3,)
        np.testing.assert_allclose(reps1.data, reps.data[0], atol=1e-12)

    def test_identical_rows(self, cfg3):
        store = perturbed_params(cfg3, 1)
        row = np.random.default_rng(1).normal(size=4)
        obs = np.stack([row, row, row[::-1]])
        reps, values = encode(store, obs, cfg3)
        np.testing.assert_allclose(reps.data[0], reps.data[1], atol=1e-12)
        assert values.data[0] == pytest.approx(values.data[1], abs=1e-12)
        assert not np.allclose(reps.data[0], reps.data[2])

    def test_shape_mismatch(self, cfg3):
        with pytest.raises(ValueError):
            encode(init_params(cfg3, 0), np.zeros((3, 5)), cfg3)

    def test_value_head_gradient(self, cfg3):
        store = perturbed_params(cfg3, 2)
        obs = np.random.default_rng(2).normal(size=(3, 4))
        leaves = store.leaves()
        _, values = encode(leaves, obs, cfg3)
        grads = nn.grad_map((values * np.array([1.0, -0.5, 2.0])).sum(), leaves)

        def f():
            return float((encode(store, obs, cfg3)[1].data * np.array([1.0, -0.5, 2.0])).sum())

        for name in ("encoder.embed.w", "encoder.block0.attn.q.w", "encoder.block0.mlp.fc1.w",
                     "encoder.value.fc2.w", "encoder.obs_ln.g"):
            assert max_rel_error(grads[name], numeric_grad(f, store.params[name])) < 1e-6, name
        assert all(np.all(grads[k] == 0) for k in grads if not k.startswith("encoder"))


class TestScoring:
    def test_identical_rows(self, cfg3):
        store = perturbed_params(cfg3, 3)
        r = np.random.default_rng(3).normal(size=8)
        credits = score_credits(store, np.stack([r, r, -r]), cfg3).data
        assert credits[0] == credits[1]

    def test_small_at_init(self):
        cfg = ModelConfig(n_agents=3, obs_dim=5, n_actions=3)
        store = init_params(cfg, 4)
        rng = np.random.default_rng(4)
        obs = rng.normal(size=(100, 3, 5))
        reps, _ = encode(store, obs, cfg)
        credits = score_credits(store, reps, cfg).data
        assert np.max(np.abs(credits)) <= 0.5
        # near-uniform order distribution
        probs = np.exp(pl.pl_log_prob(credits, np.broadcast_to([0, 1, 2], credits.shape)))
        np.testing.assert_allclose(probs, 1 / 6, atol=0.02)

    def test_feeds_mode(self, cfg3):
        store = perturbed_params(cfg3, 5)
        reps, _ = encode(store, np.random.default_rng(5).normal(size=(3, 4)), cfg3)
        order = pl.pl_mode(score_credits(store, reps, cfg3).data)
        assert sorted(order.tolist()) == [0, 1, 2]

    def test_stop_gradient(self, cfg3):
        store = perturbed_params(cfg3, 6)
        leaves = store.leaves()
        reps, _ = encode(leaves, np.random.default_rng(6).normal(size=(3, 4)), cfg3)
        grads = nn.grad_map(score_credits(leaves, reps, cfg3).sum(), leaves)
        assert all(np.all(g == 0) for k, g in grads.items() if k.startswith("encoder"))
        assert any(np.any(g != 0) for k, g in grads.items() if k.startswith("scoring"))

    def test_gradient_flow_flag(self):
        cfg = ModelConfig(n_agents=2, obs_dim=3, n_actions=2, d_model=4, score_grad_to_encoder=True)
        store = perturbed_params(cfg, 7)
        leaves = store.leaves()
        reps, _ = encode(leaves, np.ones((2, 3)) * [[1.0], [2.0]], cfg)
        grads = nn.grad_map(score_credits(leaves, reps, cfg).sum(), leaves)
        assert np.any(grads["encoder.embed.w"] != 0)


class TestSelectOrder:
    def test_infer_mode(self):
        s = select_order([0.2, 1.5, -3.0], OrderingStrategy("learned-pl"), "infer")
        assert s.permutation.tolist() == [1, 0, 2]
        assert s.log_prob == pytest.approx(pl.pl_log_prob([0.2, 1.5, -3.0], [1, 0, 2]))

    def test_train_mode_samples(self):
        z = np.zeros((2000, 3))
        s = select_order(z, OrderingStrategy("learned-pl"), "train", np.random.default_rng(0))
        assert len({tuple(r) for r in s.permutation.tolist()}) == 6

    def test_random_uniform(self):
        z = np.zeros((60_000, 3))
        s = select_order(z, OrderingStrategy("random"), "train", np.random.default_rng(1))
        _, counts = np.unique(s.permutation, axis=0, return_counts=True)
        assert len(counts) == 6
        np.testing.assert_allclose(counts / 60_000, 1 / 6, atol=0.01)
        np.testing.assert_allclose(s.log_prob, -math.log(6))

    def test_fixed(self):
        strat = OrderingStrategy("fixed", (0, 1, 2))
        for mode in ("train", "infer"):
            s = select_order([5.0, -1.0, 9.0], strat, mode, 0)
            assert s.permutation.tolist() == [0, 1, 2]
            assert s.log_prob == pytest.approx(pl.pl_log_prob([5.0, -1.0, 9.0], [0, 1, 2]))

    @pytest.mark.parametrize("kwargs", [{"kind": "fixed"}, {"kind": "bogus"}, {"kind": "fixed", "fixed_order": (0, 0)}])
    def test_invalid_strategy(self, kwargs):
        with pytest.raises(ValueError):
            OrderingStrategy(**kwargs)

    def test_fixed_length_mismatch(self):
        with pytest.raises(ValueError):
            select_order([0.0, 0.0, 0.0], OrderingStrategy("fixed", (1, 0)), "infer")

    def test_translation_invariance(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            z = rng.integers(-20, 20, size=4) / 8.0
            c = float(rng.integers(-10, 10))
            a = select_order(z, OrderingStrategy(), "infer").permutation
            b = select_order(z + c, OrderingStrategy(), "infer").permutation
            assert np.array_equal(a, b)


class TestPLOp:
    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        z = rng.normal(size=(4, 3))
        orders = np.argsort(rng.random((4, 3)), axis=1)
        w = rng.normal(size=4)
        t = ad.Tensor(z, requires_grad=True)
        (pl_log_prob_op(t, orders) * w).sum().backward()
        fd = numeric_grad(lambda: float((pl.pl_log_prob(z, orders) * w).sum()), z)
        assert max_rel_error(t.grad, fd) < 1e-6


def all_orders(n):
    return [np.array(p) for p in itertools.permutations(range(n))]


class TestDecode:
    def test_single_agent(self):
        cfg = ModelConfig(n_agents=1, obs_dim=2, n_actions=3, d_model=4)
        store = perturbed_params(cfg, 4)
        reps, _ = encode(store, np.array([[0.3, -1.0]]), cfg)
        lp, ent = decode_train(store, reps, [0], [2], cfg)
        assert lp.shape == (1,) and lp.data[0] <= 0 and ent.data[0] > 0
        acts, lpi = decode_infer(store, reps, [0], cfg, np.random.default_rng(0))
        assert acts.shape == (1,) and np.isfinite(lpi[0]) and lpi[0] <= 0

    def test_invalid_action(self, cfg3):
        store = init_params(cfg3, 0)
        reps, _ = encode(store, np.zeros((3, 4)), cfg3)
        with pytest.raises(ValueError):
            decode_train(store, reps, [0, 1, 2], [0, 3, 1], cfg3)
        with pytest.raises(ValueError):
            decode_train(store, reps, [0, 1, 1], [0, 1, 1], cfg3)

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_order_causality(self, n):
        cfg = ModelConfig(n_agents=n, obs_dim=3, n_actions=3, d_model=8, n_heads=2)
        store = perturbed_params(cfg, n)
        rng = np.random.default_rng(n)
        reps, _ = encode(store, rng.normal(size=(n, 3)), cfg)
        actions = rng.integers(0, 3, size=n)
        for order in all_orders(n):
            base = decode_train(store, reps, order, actions, cfg)[0].data
            for k in range(n):
                changed = actions.copy()
                changed[order[k]] = (changed[order[k]] + 1) % 3
                out = decode_train(store, reps, order, changed, cfg)[0].data
                for j in range(k):
                    assert out[order[j]] == base[order[j]]

    def test_last_agent_change(self, cfg3):
        store = perturbed_params(cfg3, 8)
        reps, _ = encode(store, np.random.default_rng(8).normal(size=(3, 4)), cfg3)
        order = np.array([2, 0, 1])
        a = np.array([0, 1, 2])
        b = a.copy()
        b[1] = 0
        la = decode_train(store, reps, order, a, cfg3)[0].data
        lb = decode_train(store, reps, order, b, cfg3)[0].data
        assert la[2] == lb[2] and la[0] == lb[0] and la[1] != lb[1]

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_train_infer_consistency(self, n):
        cfg = ModelConfig(n_agents=n, obs_dim=3, n_actions=4, d_model=8, n_heads=2, n_blocks=2)
        store = perturbed_params(cfg, 10 + n)
        rng = np.random.default_rng(n)
        obs = rng.normal(size=(6, n, 3))
        reps, _ = encode(store, obs, cfg)
        orders = np.argsort(rng.random((6, n)), axis=1)
        acts, lp_inf = decode_infer(store, reps, orders, cfg, rng)
        lp_train, _ = decode_train(store, reps, orders, acts, cfg)
        np.testing.assert_allclose(lp_train.data, lp_inf, atol=1e-6)

    def test_deterministic_repeat(self, cfg3):
        pol = Policy(cfg3, store=perturbed_params(cfg3, 9))
        obs = np.random.default_rng(9).normal(size=(3, 4))
        r1 = pol.act(obs, np.random.default_rng(1), mode="infer")
        r2 = pol.act(obs, np.random.default_rng(2), mode="infer")
        for field in ("order", "actions", "per_agent_log_probs", "order_log_prob", "values"):
            assert np.array_equal(getattr(r1, field), getattr(r2, field))

    def test_reindex_round_trip(self, cfg3):
        store = perturbed_params(cfg3, 12)
        reps, _ = encode(store, np.random.default_rng(12).normal(size=(3, 4)), cfg3)
        acts = np.array([2, 0, 1])
        for order in all_orders(3):
            lp = decode_train(store, reps, order, acts, cfg3)[0].data
            by_position = lp[order]
            back = np.empty(3)
            back[order] = by_position
            assert np.array_equal(back, lp)


def imitation_decoder(strength=6.0, own=1.5):
    """Two agents, two actions; the agent decoded second copies the first agent's action.

    All block outputs are zero so the residual stream carries ``rep + emb``
    untouched. Dims 0-1 carry the previous action, dims 2-3 the agent's own
    preference.
    """
    cfg = ModelConfig(n_agents=2, obs_dim=1, n_actions=2, d_model=4, n_heads=1, n_blocks=1)
    store = init_params(cfg, 0)
    p = store.params
    for k in p:
        if k.startswith("decoder.block0.") and (k.endswith(".w") or k.endswith(".b")) and ".ln" not in k:
            p[k][...] = 0.0
    p["decoder.action_emb"][...] = [[strength, -strength, 0, 0], [-strength, strength, 0, 0], [0, 0, 0, 0]]
    p["decoder.head.fc1.w"][...] = np.eye(4)
    p["decoder.head.fc1.b"][...] = 0.0
    p["decoder.head.fc2.w"][...] = [[4.0, 0.0], [0.0, 4.0], [4.0, 0.0], [0.0, 4.0]]
    p["decoder.head.fc2.b"][...] = 0.0
    reps = np.array([[0, 0, own, -own], [0, 0, -own, own]], dtype=float)
    return cfg, store, reps


def joint_distribution(cfg, store, reps, order):
    dist = {}
    for a in itertools.product(range(cfg.n_actions), repeat=cfg.n_agents):
        lp, _ = decode_train(store, reps, order, np.array(a), cfg)
        dist[a] = math.exp(lp.data.sum())
    return dist


class TestImitationDecoder:
    def test_orders_change_joint_distribution(self):
        cfg, store, reps = imitation_decoder()
        d01 = joint_distribution(cfg, store, reps, [0, 1])
        d10 = joint_distribution(cfg, store, reps, [1, 0])
        assert sum(d01.values()) == pytest.approx(1.0, abs=1e-12)
        assert sum(d10.values()) == pytest.approx(1.0, abs=1e-12)
        # the first mover follows its own preference and the second copies it
        assert max(d01, key=d01.get) == (0, 0)
        assert max(d10, key=d10.get) == (1, 1)
        tv = 0.5 * sum(abs(d01[a] - d10[a]) for a in d01)
        assert tv > 0.5

    def test_infer_agrees_with_enumeration(self):
        cfg, store, reps = imitation_decoder()
        for order, expected in (([0, 1], [0, 0]), ([1, 0], [1, 1])):
            acts, _ = decode_infer(store, reps, order, cfg, deterministic=True)
            assert acts.tolist() == expected
            d = joint_distribution(cfg, store, reps, order)
            draws = decode_infer(store, np.broadcast_to(reps, (20_000, 2, 4)), np.array(order), cfg,
                                 np.random.default_rng(0))[0]
            freq = np.mean(np.all(draws == expected, axis=1))
            assert freq == pytest.approx(d[tuple(expected)], abs=0.01)


class TestPolicyFacade:
    def test_act_batched(self, cfg3):
        pol = Policy(cfg3, OrderingStrategy("learned-pl"), rng=0)
        obs = np.random.default_rng(0).normal(size=(7, 3, 4))
        rec = pol.act(obs, np.random.default_rng(1))
        assert rec.order.shape == (7, 3) and rec.actions.shape == (7, 3)
        assert np.all(rec.per_agent_log_probs <= 0) and np.all(rec.order_log_prob <= 0)
        lp, _ = decode_train(pol.store, encode(pol.store, obs, cfg3)[0], rec.order, rec.actions, cfg3)
        np.testing.assert_allclose(lp.data, rec.per_agent_log_probs, atol=1e-9)

    def test_metadata_round_trip(self, cfg3):
        pol = Policy(cfg3, OrderingStrategy("fixed", (2, 1, 0)), rng=0)
        back = Policy.from_metadata(pol.metadata(), pol.store)
        assert back.cfg == cfg3 and back.strategy == pol.strategy

    def test_metadata_mismatch(self, cfg3):
        pol = Policy(cfg3, rng=0)
        meta = dict(pol.metadata(), d_model=16, n_heads=1)
        with pytest.raises(ValueError):
            Policy.from_metadata(meta, pol.store)
