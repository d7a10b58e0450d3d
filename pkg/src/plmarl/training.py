"""Rollouts, GAE, the three PPO-style losses and the training iteration."""
from __future__ import annotations

import multiprocessing as mp
from dataclasses import asdict, dataclass, fields, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from ._validation import StateError, check_random_state
from .envs import EnvSpec, make_env
from .policy import Policy, decode_train, encode, pl_log_prob_op, score_credits

UNIMPLEMENTED_HOOKS = ("huber_loss", "value_clipping", "lr_schedule", "obs_normalization")


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.05
    ppo_epochs: int = 10
    n_minibatches: int = 1
    lr: float = 5e-4
    lr_encoder: Optional[float] = None
    lr_decoder: Optional[float] = None
    lr_scoring: Optional[float] = None
    entropy_coef: float = 0.01
    ranking_loss_coef: float = 1e-2
    max_grad_norm: Optional[float] = 0.5
    normalize_advantages: bool = True
    episode_length: int = 1
    n_rollout_threads: int = 32
    # hooks kept for config compatibility; enabling any of them is an error
    huber_loss: bool = False
    value_clipping: bool = False
    lr_schedule: str = "constant"
    obs_normalization: bool = False

    def __post_init__(self):
        checks = [
            ("gamma", 0.0 <= self.gamma < 1.0, "must lie in [0, 1)"),
            ("gae_lambda", 0.0 <= self.gae_lambda <= 1.0, "must lie in [0, 1]"),
            ("clip_eps", self.clip_eps > 0, "must be > 0"),
            ("ppo_epochs", self.ppo_epochs >= 1, "must be >= 1"),
            ("n_minibatches", self.n_minibatches >= 1, "must be >= 1"),
            ("lr", self.lr > 0, "must be > 0"),
            ("entropy_coef", self.entropy_coef >= 0, "must be >= 0"),
            ("ranking_loss_coef", self.ranking_loss_coef >= 0, "must be >= 0"),
            ("max_grad_norm", self.max_grad_norm is None or self.max_grad_norm > 0, "must be > 0 or unset"),
            ("episode_length", self.episode_length >= 1, "must be >= 1"),
            ("n_rollout_threads", self.n_rollout_threads >= 1, "must be >= 1"),
        ]
        for seg in ("encoder", "decoder", "scoring"):
            v = getattr(self, f"lr_{seg}")
            checks.append((f"lr_{seg}", v is None or v > 0, "must be > 0 or unset"))
        for name, ok, msg in checks:
            if not ok:
                raise ValueError(f"{name}: {msg}, got {getattr(self, name)!r}")
        for hook in UNIMPLEMENTED_HOOKS:
            value = getattr(self, hook)
            if value not in (False, "constant"):
                raise ValueError(f"{hook}: not implemented, must stay disabled")

    @property
    def steps_per_iteration(self) -> int:
        return self.episode_length * self.n_rollout_threads

    def learning_rates(self) -> dict:
        return {seg: getattr(self, f"lr_{seg}") or self.lr for seg in ("encoder", "decoder", "scoring")}

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RolloutBatch:
    """Time-major rollout arrays; leading axes are (T, E)."""

    observations: np.ndarray     # (T, E, n, d)
    orders: np.ndarray           # (T, E, n)
    order_log_probs: np.ndarray  # (T, E)
    actions: np.ndarray          # (T, E, n)
    log_probs: np.ndarray        # (T, E, n)
    rewards: np.ndarray          # (T, E)
    values: Optional[np.ndarray]  # (T, E, n)
    dones: np.ndarray            # (T, E)
    last_values: Optional[np.ndarray] = None  # (E, n), bootstrap after the final step
    advantages: Optional[np.ndarray] = None   # (T, E)
    returns: Optional[np.ndarray] = None      # (T, E) value targets

    @property
    def size(self) -> int:
        return int(self.rewards.size)

    @staticmethod
    def concat_envs(parts: list["RolloutBatch"]) -> "RolloutBatch":
        out = {}
        for f in fields(RolloutBatch):
            vals = [getattr(p, f.name) for p in parts]
            if vals[0] is None:
                out[f.name] = None
            else:
                axis = 0 if f.name == "last_values" else 1
                out[f.name] = np.concatenate(vals, axis=axis)
        return RolloutBatch(**out)


def compute_gae(batch: RolloutBatch, gamma: float, lam: float) -> RolloutBatch:
    """Advantages from the team value ``mean_i V_i``; no bootstrap across ``done``."""
    if batch.values is None:
        raise StateError("compute_gae needs per-agent values recorded at collection")
    v = batch.values.mean(axis=-1)
    last = np.zeros(v.shape[1]) if batch.last_values is None else batch.last_values.mean(axis=-1)
    not_done = 1.0 - batch.dones.astype(np.float64)
    adv = np.zeros_like(v)
    running = np.zeros(v.shape[1])
    for t in reversed(range(v.shape[0])):
        nxt = last if t == v.shape[0] - 1 else v[t + 1]
        delta = batch.rewards[t] + gamma * nxt * not_done[t] - v[t]
        running = delta + gamma * lam * not_done[t] * running
        adv[t] = running
    return replace(batch, advantages=adv, returns=adv + v)


# ---- losses ------------------------------------------------------------------

@dataclass
class Minibatch:
    """Flat view of a rollout, one row per (timestep, env)."""

    observations: np.ndarray
    orders: np.ndarray
    order_log_probs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.advantages)

    def take(self, idx) -> "Minibatch":
        return Minibatch(**{f.name: getattr(self, f.name)[idx] for f in fields(Minibatch)})


def flatten(batch: RolloutBatch) -> Minibatch:
    if batch.advantages is None:
        raise StateError("run compute_gae before building minibatches")
    n = batch.size
    flat = lambda x: x.reshape((n,) + x.shape[2:])  # noqa: E731
    return Minibatch(flat(batch.observations), flat(batch.orders), flat(batch.order_log_probs),
                     flat(batch.actions), flat(batch.log_probs), flat(batch.advantages), flat(batch.returns))


def _check_nonempty(mb: Minibatch):
    if len(mb) == 0:
        raise ValueError("batch is empty")


def normalized(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def clipped_surrogate(new_log_prob, old_log_prob, adv, clip_eps: float) -> ad.Tensor:
    """``-mean(min(r A, clip(r, 1-eps, 1+eps) A))`` with ``r = exp(new - old)``."""
    ratio = ad.exp(new_log_prob - old_log_prob)
    unclipped = ratio * adv
    clipped = ad.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    return -ad.mean(ad.minimum(unclipped, clipped))


def _values_term(values, mb):
    diff = values - mb.returns[:, None].astype(values.dtype)
    return ad.mean(diff * diff)


def _decoder_term(params, reps, mb, cfg, clip_eps, entropy_coef, adv):
    lp, ent = decode_train(params, reps, mb.orders, mb.actions, cfg)
    surrogate = clipped_surrogate(lp, mb.log_probs.astype(lp.dtype), adv[:, None].astype(lp.dtype), clip_eps)
    return surrogate - entropy_coef * ad.mean(ent), lp


def _ranking_term(params, reps, mb, cfg, clip_eps, adv):
    new = pl_log_prob_op(score_credits(params, reps, cfg), mb.orders)
    return clipped_surrogate(new, mb.order_log_probs.astype(new.dtype), adv.astype(new.dtype), clip_eps)


def encoder_loss(params, mb: Minibatch, cfg) -> ad.Tensor:
    """Mean squared error of every agent's value against the shared value target."""
    _check_nonempty(mb)
    _, values = encode(params, mb.observations, cfg)
    return _values_term(values, mb)


def decoder_loss(params, mb: Minibatch, cfg, clip_eps: float, entropy_coef: float = 0.0,
                 normalize: bool = False) -> ad.Tensor:
    _check_nonempty(mb)
    reps, _ = encode(params, mb.observations, cfg)
    adv = normalized(mb.advantages) if normalize else mb.advantages
    return _decoder_term(params, reps, mb, cfg, clip_eps, entropy_coef, adv)[0]


def ranking_loss(params, mb: Minibatch, cfg, clip_eps: float, normalize: bool = False) -> ad.Tensor:
    """Clipped surrogate on the Plackett-Luce probability of the recorded orders, averaged over timesteps."""
    _check_nonempty(mb)
    reps, _ = encode(params, mb.observations, cfg)
    adv = normalized(mb.advantages) if normalize else mb.advantages
    return _ranking_term(params, reps, mb, cfg, clip_eps, adv)


def total_loss(params, mb: Minibatch, cfg, tcfg: TrainConfig, use_ranking: bool):
    """Encoder + decoder (+ weighted ranking) loss from one shared encoder pass."""
    _check_nonempty(mb)
    reps, values = encode(params, mb.observations, cfg)
    adv = normalized(mb.advantages) if tcfg.normalize_advantages else mb.advantages
    enc = _values_term(values, mb)
    dec, lp = _decoder_term(params, reps, mb, cfg, tcfg.clip_eps, tcfg.entropy_coef, adv)
    loss = enc + dec
    rank = None
    if use_ranking:
        rank = _ranking_term(params, reps, mb, cfg, tcfg.clip_eps, adv)
        loss = loss + tcfg.ranking_loss_coef * rank
    log_ratio = lp.data - mb.log_probs
    parts = {
        "encoder_loss": float(enc.data),
        "decoder_loss": float(dec.data),
        "ranking_loss": None if rank is None else float(rank.data),
        "approx_kl": float(np.mean(np.expm1(log_ratio) - log_ratio)),
    }
    return loss, parts


# ---- rollout collection ------------------------------------------------------

class RolloutWorker:
    """Owns a slice of environments and collects trajectories with a parameter snapshot."""

    def __init__(self, env_spec: EnvSpec, n_envs: int, seed_seq: np.random.SeedSequence):
        env_seed, act_seed = seed_seq.spawn(2)
        self.env = make_env(env_spec, n_envs)
        self.rng = np.random.default_rng(act_seed)
        self.obs = self.env.reset(np.random.default_rng(env_seed))
        self.ep_return = np.zeros(n_envs)

    def collect(self, policy: Policy, steps: int):
        n_envs = self.env.n_envs
        buf = {k: [] for k in ("observations", "orders", "order_log_probs", "actions", "log_probs",
                               "rewards", "values", "dones")}
        finished = []
        for _ in range(steps):
            rec = policy.act(self.obs, self.rng, mode="train")
            next_obs, reward, done = self.env.step(rec.actions)
            for k, v in (("observations", self.obs), ("orders", rec.order), ("order_log_probs", rec.order_log_prob),
                         ("actions", rec.actions), ("log_probs", rec.per_agent_log_probs),
                         ("rewards", reward), ("values", rec.values), ("dones", done)):
                buf[k].append(np.asarray(v))
            self.ep_return += reward
            finished.extend(self.ep_return[done].tolist())
            self.ep_return[done] = 0.0
            self.obs = self.env.reset_done(done) if done.any() else next_obs
        with ad.no_grad():
            last_values = encode(policy.store, self.obs, policy.cfg)[1].data.reshape(n_envs, -1)
        batch = RolloutBatch(**{k: np.stack(v) for k, v in buf.items()}, last_values=last_values)
        return batch, finished


def _worker_main(conn, env_spec, n_envs, seed_seq):
    worker = RolloutWorker(env_spec, n_envs, seed_seq)
    while True:
        msg = conn.recv()
        if msg is None:
            break
        policy, steps = msg
        try:
            conn.send(("ok", worker.collect(policy, steps)))
        except Exception as exc:  # report to the coordinator instead of dying silently
            conn.send(("error", repr(exc)))
    conn.close()


class RolloutPool:
    """Coordinator over one or more rollout workers.

    With one worker everything runs in-process. With more, each worker is a
    separate process holding its own environments; the coordinator sends a
    read-only policy snapshot and merges returned trajectories in worker order.
    """

    def __init__(self, env_spec: EnvSpec, n_envs: int, seed: int, workers: int = 1):
        if workers < 1:
            raise ValueError("workers: must be >= 1")
        workers = min(workers, n_envs)
        seqs = np.random.SeedSequence(seed).spawn(workers)
        sizes = [len(c) for c in np.array_split(np.arange(n_envs), workers)]
        self.workers = workers
        self._local = None
        self._procs = []
        if workers == 1:
            self._local = RolloutWorker(env_spec, n_envs, seqs[0])
            return
        ctx = mp.get_context("spawn")
        for size, seq in zip(sizes, seqs):
            parent, child = ctx.Pipe()
            proc = ctx.Process(target=_worker_main, args=(child, env_spec, size, seq), daemon=True)
            proc.start()
            self._procs.append((proc, parent))

    def collect(self, policy: Policy, steps: int):
        if self._local is not None:
            return self._local.collect(policy, steps)
        snapshot = Policy(policy.cfg, policy.strategy, nn.ParameterStore(dict(policy.store.params)))
        for _, conn in self._procs:
            conn.send((snapshot, steps))
        parts, finished = [], []
        for _, conn in self._procs:
            status, payload = conn.recv()
            if status != "ok":
                raise RuntimeError(f"rollout worker failed: {payload}")
            parts.append(payload[0])
            finished.extend(payload[1])
        return RolloutBatch.concat_envs(parts), finished

    def close(self):
        for proc, conn in self._procs:
            try:
                conn.send(None)
            except (BrokenPipeError, OSError):
                pass
            proc.join(timeout=5)
        self._procs = []

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---- optimisation ------------------------------------------------------------

def uses_ranking(policy: Policy) -> bool:
    return policy.strategy.kind == "learned-pl"


def update(policy: Policy, batch: RolloutBatch, tcfg: TrainConfig, rng) -> dict:
    """PPO epochs over a GAE-processed batch; returns averaged loss metrics."""
    rng = check_random_state(rng)
    data = flatten(batch)
    use_rank = uses_ranking(policy) and tcfg.ranking_loss_coef > 0
    lrs = tcfg.learning_rates()
    sums: dict[str, float] = {}
    count = 0
    for _ in range(tcfg.ppo_epochs):
        perm = rng.permutation(len(data))
        for idx in np.array_split(perm, tcfg.n_minibatches):
            if len(idx) == 0:
                continue
            leaves = policy.store.leaves()
            loss, parts = total_loss(leaves, data.take(idx), policy.cfg, tcfg, use_rank)
            grads = nn.grad_map(loss, leaves)
            nn.adam_step(policy.store, grads, lrs, max_grad_norm=tcfg.max_grad_norm)
            for k, v in parts.items():
                if v is not None:
                    sums[k] = sums.get(k, 0.0) + v
            count += 1
    out = {k: sums.get(k, 0.0) / count if k in sums else None
           for k in ("encoder_loss", "decoder_loss", "ranking_loss", "approx_kl")}
    return out


def train_iteration(policy: Policy, pool: RolloutPool, tcfg: TrainConfig, rng, iteration: int = 0,
                    env_steps: int = 0) -> dict:
    """Collect ``episode_length x n_rollout_threads`` steps, then optimise."""
    batch, finished = pool.collect(policy, tcfg.episode_length)
    batch = compute_gae(batch, tcfg.gamma, tcfg.gae_lambda)
    losses = update(policy, batch, tcfg, rng)
    ranked = uses_ranking(policy)
    record = {
        "iteration": iteration,
        "env_steps": env_steps + batch.size,
        "mean_return": float(np.mean(finished)) if finished else None,
        "encoder_loss": losses["encoder_loss"],
        "decoder_loss": losses["decoder_loss"],
        "ranking_loss": losses["ranking_loss"] if ranked else None,
        "order_entropy": float(-np.mean(batch.order_log_probs)) if ranked else None,
        "approx_kl": losses["approx_kl"],
    }
    return record


def train_loop(policy: Policy, env_spec: EnvSpec, tcfg: TrainConfig, total_env_steps: int, rng,
               env_seed: int, workers: int = 1, callback=None) -> list:
    """Run iterations until ``total_env_steps`` is reached; ``callback(record)`` after each."""
    rng = check_random_state(rng)
    n_iter = -(-total_env_steps // tcfg.steps_per_iteration)
    records, steps = [], 0
    with RolloutPool(env_spec, tcfg.n_rollout_threads, env_seed, workers) as pool:
        for it in range(1, n_iter + 1):
            rec = train_iteration(policy, pool, tcfg, rng, it, steps)
            steps = rec["env_steps"]
            records.append(rec)
            if callback is not None:
                callback(rec)
    return records


METRIC_FIELDS = ("iteration", "env_steps", "mean_return", "encoder_loss", "decoder_loss",
                 "ranking_loss", "order_entropy", "approx_kl")


# ---- evaluation --------------------------------------------------------------

def evaluate(policy: Policy, env_spec: EnvSpec, episodes: int, seed: int = 0,
             optimal_orders: Optional[dict] = None, batch_envs: int = 1000) -> dict:
    """Deterministic inference episodes: greedy actions and the mode order.

    Orders are tallied at every decision state. ``optimal_orders`` maps a
    state index to the set of oracle-optimal orders.
    """
    if episodes < 1:
        raise ValueError("episodes: must be >= 1")
    rng = np.random.default_rng(seed)
    returns: list[float] = []
    order_counts: dict[tuple, int] = {}
    key_first = hits = states_seen = 0
    remaining = episodes
    while remaining > 0:
        n_envs = min(remaining, batch_envs)
        env = make_env(env_spec, n_envs)
        obs = env.reset(rng)
        alive = np.ones(n_envs, dtype=bool)
        ep_ret = np.zeros(n_envs)
        while alive.any():
            rec = policy.act(obs, rng, mode="infer")
            s_idx = env.state_index()
            for e in np.flatnonzero(alive):
                order = tuple(int(i) for i in rec.order[e])
                order_counts[order] = order_counts.get(order, 0) + 1
                states_seen += 1
                if env_spec.kind == "key-agent-match" and order[0] == int(env.key[e]):
                    key_first += 1
                if optimal_orders is not None and order in optimal_orders[int(s_idx[e])]:
                    hits += 1
            obs, reward, done = env.step(rec.actions)
            ep_ret += reward * alive
            alive &= ~done
        returns.extend(ep_ret.tolist())
        remaining -= n_envs
    out = {
        "episodes": episodes,
        "mean_return": float(np.mean(returns)),
        "order_distribution": {
            " ".join(map(str, o)): c / states_seen for o, c in sorted(order_counts.items())
        },
    }
    if env_spec.kind == "key-agent-match":
        out["p_key_first"] = key_first / states_seen
    if optimal_orders is not None:
        out["p_oracle_optimal_order"] = hits / states_seen
    return out
