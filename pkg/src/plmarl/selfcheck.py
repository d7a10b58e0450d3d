"""Built-in property battery behind ``plmarl selfcheck``.

Every property is checked against an independent reference (enumeration,
finite differences or a brute-force sum). Functions under test are looked up
on their modules at call time so a patched module is what gets checked.
"""
from __future__ import annotations

import itertools
import sys
import time

import numpy as np

from . import autodiff as ad
from . import nn
from . import plackett_luce as pl
from . import policy as pol
from .envs import TabularGame
from .gradcheck import max_rel_error, numeric_grad, probe_indices
from .oracle import exact_values, verify_decomposition
from .training import RolloutBatch, compute_gae

# upper 1% point of chi-square with 5 degrees of freedom (3! - 1 categories)
CHI2_DF5_Q99 = 15.0863


def gae_reference(rewards, values, dones, last_value, gamma, lam):
    """O(T^2) definition: A_t = sum_l (gamma lam)^l delta_{t+l}, cut at episode ends."""
    T = len(rewards)
    nxt = np.append(values[1:], last_value)
    delta = rewards + gamma * nxt * (1 - dones) - values
    adv = np.zeros(T)
    for t in range(T):
        acc, w = 0.0, 1.0
        for k in range(t, T):
            acc += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


def check_pl_normalization(rng):
    worst = 0.0
    for n in range(1, 6):
        for _ in range(10):
            z = rng.normal(scale=2.0, size=n)
            worst = max(worst, abs(sum(p for _, p in pl.pl_enumerate(z)) - 1.0))
    return worst < 1e-9, f"max |sum - 1| = {worst:.2e}"


def check_pl_gradient(rng):
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 7))
        z = rng.normal(size=n)
        sigma = rng.permutation(n)
        fd = numeric_grad(lambda: float(pl.pl_log_prob(z, sigma)), z)
        worst = max(worst, float(np.max(np.abs(pl.pl_log_prob_grad(z, sigma) - fd))))
    return worst < 1e-6, f"max |analytic - fd| = {worst:.2e}"


def check_score_zero_mean(rng):
    worst = 0.0
    for n in (2, 3, 4, 5):
        z = rng.normal(size=n)
        total = sum(p * pl.pl_log_prob_grad(z, np.array(s)) for s, p in pl.pl_enumerate(z))
        worst = max(worst, float(np.max(np.abs(total))))
    return worst < 1e-9, f"max |E[score]| = {worst:.2e}"


def check_pl_sampling(rng):
    z = np.array([0.8, -0.3, 0.1])
    draws = 30_000
    samples = pl.pl_sample(np.broadcast_to(z, (draws, 3)), rng).permutation
    exact = dict(pl.pl_enumerate(z))
    counts = {s: 0 for s in exact}
    for row in map(tuple, samples.tolist()):
        counts[row] += 1
    chi2 = sum((counts[s] - draws * p) ** 2 / (draws * p) for s, p in exact.items())
    return chi2 < CHI2_DF5_Q99, f"chi2 = {chi2:.2f} (critical {CHI2_DF5_Q99})"


def _small_model(n=3, seed=0, obs_dim=4, n_actions=3):
    cfg = pol.ModelConfig(n, obs_dim, n_actions, d_model=8, n_heads=2, n_blocks=1)
    store = pol.init_params(cfg, seed)
    r = np.random.default_rng(seed + 1)
    for v in store.params.values():
        v += r.normal(scale=0.3, size=v.shape)
    return cfg, store


def check_network_gradients(rng):
    cfg, store = _small_model()
    obs = rng.normal(size=(2, 3, 4))
    orders = np.array([[2, 0, 1], [0, 1, 2]])
    acts = rng.integers(0, 3, size=(2, 3))
    w = rng.normal(size=(2, 3))
    # the scorer sees representations through a stop-gradient, so finite
    # differences must hold its input fixed as well
    frozen = pol.encode(store.params, obs, cfg)[0].data.copy()

    def loss(params):
        reps, values = pol.encode(params, obs, cfg)
        lp, _ = pol.decode_train(params, reps, orders, acts, cfg)
        credits = pol.score_credits(params, frozen, cfg)
        return ad.sum_(lp * w) + ad.sum_(values * w) + ad.sum_(pol.pl_log_prob_op(credits, orders))

    leaves = store.leaves()
    grads = nn.grad_map(loss(leaves), leaves)
    worst = 0.0
    for name in ("encoder.block0.attn.q.w", "decoder.block0.attn.k.w", "decoder.action_emb",
                 "scoring.fc0.w", "encoder.value.fc2.w"):
        idx = probe_indices(store.params[name].shape, 6, rng)
        fd = numeric_grad(lambda: float(loss(store.params).data), store.params[name], indices=idx)
        worst = max(worst, max_rel_error(np.array([grads[name][i] for i in idx]), np.array([fd[i] for i in idx])))
    return worst < 1e-6, f"max relative error = {worst:.2e}"


def check_mask_causality(rng):
    for n in (2, 3, 4):
        cfg, store = _small_model(n, seed=n)
        reps, _ = pol.encode(store, rng.normal(size=(n, 4)), cfg)
        acts = rng.integers(0, 3, size=n)
        for order in itertools.permutations(range(n)):
            order = np.array(order)
            base = pol.decode_train(store, reps, order, acts, cfg)[0].data
            for k in range(n):
                changed = acts.copy()
                changed[order[k]] = (changed[order[k]] + 1) % 3
                out = pol.decode_train(store, reps, order, changed, cfg)[0].data
                if any(out[order[j]] != base[order[j]] for j in range(k)):
                    return False, f"n={n} order={order.tolist()} position {k} leaked backwards"
    return True, "bit-exact for all orders, n <= 4"


def check_train_infer(rng):
    worst = 0.0
    for n in (2, 3, 5):
        cfg, store = _small_model(n, seed=10 + n)
        reps, _ = pol.encode(store, rng.normal(size=(4, n, 4)), cfg)
        orders = np.argsort(rng.random((4, n)), axis=1)
        acts, lp_inf = pol.decode_infer(store, reps, orders, cfg, rng)
        lp_train = pol.decode_train(store, reps, orders, acts, cfg)[0].data
        worst = max(worst, float(np.max(np.abs(lp_train - lp_inf))))
    return worst < 1e-6, f"max |teacher forced - sequential| = {worst:.2e}"


def check_gae(rng):
    worst = 0.0
    for _ in range(20):
        T = int(rng.integers(1, 15))
        rewards = rng.normal(size=T)
        values = rng.normal(size=(T, 1, 2))
        dones = rng.random(T) < 0.2
        last = rng.normal(size=(1, 2))
        batch = RolloutBatch(np.zeros((T, 1, 2, 1)), np.zeros((T, 1, 2), int), np.zeros((T, 1)),
                             np.zeros((T, 1, 2), int), np.zeros((T, 1, 2)), rewards[:, None], values,
                             dones[:, None], last)
        out = compute_gae(batch, 0.9, 0.95)
        ref = gae_reference(rewards, values.mean(-1)[:, 0], dones.astype(float), last.mean(), 0.9, 0.95)
        worst = max(worst, float(np.max(np.abs(out.advantages[:, 0] - ref))))
    return worst < 1e-9, f"max |gae - reference| = {worst:.2e}"


def check_decomposition(rng):
    worst = 0.0
    for _ in range(5):
        n, a, s = 3, 2, 2
        j = a ** n
        trans = rng.dirichlet(np.ones(s), size=(s, j))
        trans /= trans.sum(-1, keepdims=True)
        game = TabularGame(n, a, rng.normal(size=(s, j)), trans, 0.8, np.full(s, 1 / s))
        v = exact_values(game, rng.dirichlet(np.ones(a), size=(n, s)))
        for st in range(s):
            for order in itertools.permutations(range(n)):
                for joint in game.joint_actions():
                    worst = max(worst, verify_decomposition(v, game, st, order, joint))
    return worst < 1e-9, f"max residual = {worst:.2e}"


PROPERTIES = [
    ("pl_normalization", check_pl_normalization),
    ("pl_log_prob_gradient", check_pl_gradient),
    ("pl_score_zero_mean", check_score_zero_mean),
    ("pl_sampling_chi_square", check_pl_sampling),
    ("network_gradients", check_network_gradients),
    ("decoder_mask_causality", check_mask_causality),
    ("train_infer_consistency", check_train_infer),
    ("gae_reference", check_gae),
    ("advantage_decomposition", check_decomposition),
]


def run_selfcheck(seed: int = 0, stream=sys.stdout):
    """Run every property; returns a list of ``(name, passed, detail)``."""
    results = []
    for name, fn in PROPERTIES:
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # a crash counts as a failed property
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        ok = bool(ok)
        results.append((name, ok, detail))
        if stream is not None:
            print(f"{'PASS' if ok else 'FAIL'} {name}: {detail} [{time.perf_counter() - start:.2f}s]", file=stream)
    return results
