"""Order-conditioned transformer policy.

The encoder turns per-agent observations into representations and value
estimates. A scoring MLP maps each representation to a decision credit; the
credits are Plackett-Luce log-preferences from which the action-generation
order is drawn. The decoder receives the representations permuted into that
order and produces each agent's action conditioned on the actions of the
agents placed before it.

Every function is batch-first: observations are ``(batch, n_agents, obs_dim)``
and all per-agent outputs are indexed by canonical agent id, not by position
in the order. A single unbatched ``(n_agents, obs_dim)`` input is accepted
and returns unbatched outputs.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import nn
from . import plackett_luce as pl
from ._validation import check_actions, check_observations, check_permutation, check_random_state

STRATEGIES = ("learned-pl", "fixed", "random")


@dataclass(frozen=True)
class ModelConfig:
    n_agents: int
    obs_dim: int
    n_actions: int
    d_model: int = 64
    n_heads: int = 1
    n_blocks: int = 1
    scoring_layers: int = 2
    # let ranking-loss gradients reach the encoder
    score_grad_to_encoder: bool = False

    def __post_init__(self):
        for name in ("n_agents", "obs_dim", "n_actions", "d_model", "n_heads", "n_blocks", "scoring_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_actions < 2:
            raise ValueError("n_actions must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OrderingStrategy:
    kind: str = "learned-pl"
    fixed_order: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown ordering strategy {self.kind!r}; expected one of {STRATEGIES}")
        if self.kind == "fixed":
            if self.fixed_order is None:
                raise ValueError("fixed ordering strategy requires fixed_order")
            order = tuple(int(i) for i in self.fixed_order)
            check_permutation(order, len(order))
            object.__setattr__(self, "fixed_order", order)


@dataclass
class JointActionRecord:
    """Result of acting; every array carries a leading batch axis when batched."""

    order: np.ndarray
    actions: np.ndarray
    per_agent_log_probs: np.ndarray
    order_log_prob: np.ndarray
    values: np.ndarray
    credits: np.ndarray = field(default=None, repr=False)


# ---- parameters --------------------------------------------------------------

def init_params(cfg: ModelConfig, rng=None, dtype=np.float64) -> nn.ParameterStore:
    rng = check_random_state(rng)
    d = cfg.d_model
    p: dict[str, np.ndarray] = {}
    nn.init_layer_norm(p, "encoder.obs_ln", cfg.obs_dim)
    nn.init_dense(p, "encoder.embed", cfg.obs_dim, d, rng, gain=np.sqrt(2.0))
    for i in range(cfg.n_blocks):
        nn.init_block(p, f"encoder.block{i}", d, rng)
    nn.init_layer_norm(p, "encoder.ln_f", d)
    nn.init_dense(p, "encoder.value.fc1", d, d, rng, gain=np.sqrt(2.0))
    nn.init_dense(p, "encoder.value.fc2", d, 1, rng, gain=0.01)

    # row n_actions is the start-of-decoding token
    p["decoder.action_emb"] = rng.normal(scale=1.0 / np.sqrt(d), size=(cfg.n_actions + 1, d))
    for i in range(cfg.n_blocks):
        nn.init_block(p, f"decoder.block{i}", d, rng)
    nn.init_layer_norm(p, "decoder.ln_f", d)
    nn.init_dense(p, "decoder.head.fc1", d, d, rng, gain=np.sqrt(2.0))
    nn.init_dense(p, "decoder.head.fc2", d, cfg.n_actions, rng, gain=0.01)

    for j in range(cfg.scoring_layers - 1):
        nn.init_dense(p, f"scoring.fc{j}", d, d, rng, gain=np.sqrt(2.0))
    nn.init_dense(p, "scoring.out", d, 1, rng, gain=0.01)
    return nn.ParameterStore({k: v.astype(dtype) for k, v in p.items()})


def _view(params) -> nn.ParamView:
    if isinstance(params, nn.ParameterStore):
        params = params.params
    return nn.ParamView(params)


def _batch(obs, cfg: ModelConfig):
    single = np.ndim(obs) == 2
    return check_observations(obs, cfg.n_agents, cfg.obs_dim), single


# ---- encoder and scoring -----------------------------------------------------

def encode(params, observations, cfg: ModelConfig):
    """Representations ``(B, n, d_model)`` and per-agent values ``(B, n)``."""
    obs, single = _batch(observations, cfg)
    p = _view(params).sub("encoder")
    obs = ad.Tensor(obs, dtype=_param_dtype(params))
    x = ad.gelu(nn.dense_forward(p.sub("embed"), nn.layer_norm_forward(p.sub("obs_ln"), obs)))
    for i in range(cfg.n_blocks):
        x = nn.block_forward(p.sub(f"block{i}"), x, None, cfg.n_heads)
    reps = nn.layer_norm_forward(p.sub("ln_f"), x)
    values = _mlp_scalar(p.sub("value"), reps, ["fc1"], "fc2")
    if single:
        return reps[0], values[0]
    return reps, values


def score_credits(params, reps, cfg: ModelConfig):
    """Per-agent decision credits, one scalar per representation row."""
    reps = ad.as_tensor(reps)
    if reps.shape[-1] != cfg.d_model:
        raise ValueError(f"representations must have last dim {cfg.d_model}, got {reps.shape}")
    if not cfg.score_grad_to_encoder:
        reps = ad.detach(reps)
    hidden = [f"fc{j}" for j in range(cfg.scoring_layers - 1)]
    return _mlp_scalar(_view(params).sub("scoring"), reps, hidden, "out")


def _mlp_scalar(p: nn.ParamView, x, hidden: list[str], out: str):
    for name in hidden:
        x = ad.gelu(nn.dense_forward(p.sub(name), x))
    y = nn.dense_forward(p.sub(out), x)
    return ad.reshape(y, y.shape[:-1])


def _param_dtype(params):
    if isinstance(params, nn.ParameterStore):
        params = params.params
    first = next(iter(params.values()))
    return first.dtype


# ---- ordering ----------------------------------------------------------------

def select_order(credits, strategy: OrderingStrategy, mode: str, rng=None) -> pl.OrderSample:
    """Choose the action-generation order from decision credits.

    ``mode="train"`` samples from the Plackett-Luce distribution,
    ``mode="infer"`` takes its mode. Fixed and random strategies ignore the
    credits when choosing but still report a log-probability.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    z = np.asarray(credits.data if isinstance(credits, ad.Tensor) else credits, dtype=np.float64)
    n = z.shape[-1]
    if strategy.kind == "learned-pl":
        if mode == "train":
            return pl.pl_sample(z, rng)
        sigma = pl.pl_mode(z)
        return pl.OrderSample(sigma, pl.pl_log_prob(z, sigma))
    if strategy.kind == "fixed":
        if len(strategy.fixed_order) != n:
            raise ValueError(f"fixed_order has {len(strategy.fixed_order)} entries for {n} agents")
        sigma = np.broadcast_to(np.asarray(strategy.fixed_order), z.shape).copy()
        return pl.OrderSample(sigma, pl.pl_log_prob(z, sigma))
    size = None if z.ndim == 1 else int(np.prod(z.shape[:-1]))
    sigma = pl.sample_uniform_permutation(n, size, check_random_state(rng))
    sigma = sigma.reshape(z.shape)
    lp = pl.uniform_log_prob(n)
    return pl.OrderSample(sigma, lp if z.ndim == 1 else np.full(z.shape[:-1], lp))


def pl_log_prob_op(credits, orders) -> ad.Tensor:
    """Differentiable ``log P(order | credits)``; the backward pass is the O(n) score gradient."""
    orders = np.asarray(orders)
    credits = ad.as_tensor(credits)
    dtype = credits.dtype

    def fwd(z):
        return np.asarray(pl.pl_log_prob(z, orders), dtype=dtype)

    def bwd(z, y, g):
        return (pl.pl_log_prob_grad(z, orders) * np.asarray(g)[..., None]).astype(dtype)

    return ad.function(fwd, bwd)(credits)


# ---- decoder -----------------------------------------------------------------

def _reorder(reps: ad.Tensor, orders: np.ndarray) -> ad.Tensor:
    idx = np.broadcast_to(orders[..., None], orders.shape + (reps.shape[-1],))
    return ad.take_along_axis(reps, idx, axis=-2)


def _decoder_logits(p: nn.ParamView, x: ad.Tensor, cfg: ModelConfig) -> ad.Tensor:
    mask = nn.AttentionMask("causal")
    for i in range(cfg.n_blocks):
        x = nn.block_forward(p.sub(f"block{i}"), x, mask, cfg.n_heads)
    x = nn.layer_norm_forward(p.sub("ln_f"), x)
    h = ad.gelu(nn.dense_forward(p.sub("head.fc1"), x))
    return nn.dense_forward(p.sub("head.fc2"), h)


def _prepare_decode(reps, orders, cfg: ModelConfig):
    reps = ad.as_tensor(reps)
    single = reps.ndim == 2
    if single:
        reps = ad.reshape(reps, (1,) + reps.shape)
    if reps.shape[1:] != (cfg.n_agents, cfg.d_model):
        raise ValueError(f"representations must be (n_agents, d_model), got {reps.shape}")
    orders = check_permutation(orders, cfg.n_agents)
    orders = np.broadcast_to(orders, (reps.shape[0], cfg.n_agents))
    return reps, orders, single


def decode_train(params, reps, orders, actions, cfg: ModelConfig):
    """Teacher-forced log-probabilities and entropies, agent-indexed, in one masked pass."""
    reps, orders, single = _prepare_decode(reps, orders, cfg)
    actions = check_actions(actions, cfg.n_actions)
    actions = np.broadcast_to(actions, orders.shape)
    p = _view(params).sub("decoder")
    acts_ord = np.take_along_axis(actions, orders, axis=1)
    start = np.full((orders.shape[0], 1), cfg.n_actions)
    shifted = np.concatenate([start, acts_ord[:, :-1]], axis=1)
    x = _reorder(reps, orders) + ad.embedding(p["action_emb"], shifted)
    logp_all = ad.log_softmax(_decoder_logits(p, x, cfg), axis=-1)
    lp_ord = ad.reshape(ad.take_along_axis(logp_all, acts_ord[..., None], axis=-1), orders.shape)
    ent_ord = -ad.sum_(ad.exp(logp_all) * logp_all, axis=-1)
    inv = np.argsort(orders, axis=1)
    lp = ad.take_along_axis(lp_ord, inv, axis=1)
    ent = ad.take_along_axis(ent_ord, inv, axis=1)
    if single:
        return lp[0], ent[0]
    return lp, ent


def decode_infer(params, reps, orders, cfg: ModelConfig, rng=None, deterministic: bool = False):
    """Generate actions one order position at a time.

    Position ``m`` sees the start token and the actions chosen at positions
    ``< m``; each step reruns the decoder on the prefix only. Returns
    agent-indexed ``(actions, log_probs)`` arrays.
    """
    rng = check_random_state(rng)
    with ad.no_grad():
        reps, orders, single = _prepare_decode(reps, orders, cfg)
        p = _view(params).sub("decoder")
        batch, n = orders.shape
        reps_ord = _reorder(reps, orders)
        emb = p["action_emb"]
        emb = emb.data if isinstance(emb, ad.Tensor) else emb
        tokens = np.full((batch, n), cfg.n_actions)
        acts_ord = np.empty((batch, n), dtype=np.int64)
        lp_ord = np.empty((batch, n))
        rows = np.arange(batch)
        for m in range(n):
            x = reps_ord[:, : m + 1] + emb[tokens[:, : m + 1]]
            logits = _decoder_logits(p, x, cfg).data[:, m]
            logp = logits - logits.max(axis=1, keepdims=True)
            logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
            if deterministic:
                a = np.argmax(logp, axis=1)
            else:
                cdf = np.cumsum(np.exp(logp), axis=1)
                u = rng.random(batch) * cdf[:, -1]
                a = np.minimum((cdf <= u[:, None]).sum(axis=1), cfg.n_actions - 1)
            acts_ord[:, m] = a
            lp_ord[:, m] = logp[rows, a]
            if m + 1 < n:
                tokens[:, m + 1] = a
        inv = np.argsort(orders, axis=1)
        actions = np.take_along_axis(acts_ord, inv, axis=1)
        log_probs = np.take_along_axis(lp_ord, inv, axis=1)
    if single:
        return actions[0], log_probs[0]
    return actions, log_probs


# ---- policy facade -----------------------------------------------------------

class Policy:
    """Bundles configuration, ordering strategy and parameters for acting."""

    def __init__(self, cfg: ModelConfig, strategy: OrderingStrategy | None = None,
                 store: nn.ParameterStore | None = None, rng=None, dtype=np.float64):
        self.cfg = cfg
        self.strategy = strategy or OrderingStrategy()
        if self.strategy.kind == "fixed" and len(self.strategy.fixed_order) != cfg.n_agents:
            raise ValueError("fixed_order length must equal n_agents")
        self.store = store if store is not None else init_params(cfg, rng, dtype)

    def act(self, observations, rng=None, mode: str = "train",
            deterministic_actions: bool | None = None) -> JointActionRecord:
        rng = check_random_state(rng)
        if deterministic_actions is None:
            deterministic_actions = mode == "infer"
        with ad.no_grad():
            reps, values = encode(self.store, observations, self.cfg)
            credits = score_credits(self.store, reps, self.cfg).data
        sample = select_order(credits, self.strategy, mode, rng)
        actions, logp = decode_infer(self.store, reps, sample.permutation, self.cfg, rng,
                                     deterministic_actions)
        return JointActionRecord(
            order=np.asarray(sample.permutation),
            actions=actions,
            per_agent_log_probs=logp,
            order_log_prob=np.asarray(sample.log_prob),
            values=values.data,
            credits=credits,
        )

    def metadata(self) -> dict:
        return {
            **self.cfg.to_dict(),
            "strategy": self.strategy.kind,
            "fixed_order": list(self.strategy.fixed_order) if self.strategy.fixed_order else None,
        }

    @classmethod
    def from_metadata(cls, meta: Mapping, store: nn.ParameterStore) -> "Policy":
        keys = ModelConfig.__dataclass_fields__
        cfg = ModelConfig(**{k: meta[k] for k in keys if k in meta})
        fixed = meta.get("fixed_order")
        strategy = OrderingStrategy(meta.get("strategy", "learned-pl"), tuple(fixed) if fixed else None)
        expected = init_params(cfg, 0)
        if set(expected.params) != set(store.params):
            raise ValueError("checkpoint parameters do not match the model configuration")
        for k, v in expected.params.items():
            if store.params[k].shape != v.shape:
                raise ValueError(f"checkpoint parameter {k!r} has shape {store.params[k].shape}, expected {v.shape}")
        return cls(cfg, strategy, store)
