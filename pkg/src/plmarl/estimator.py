"""scikit-learn style wrapper around the training loop.

Reinforcement learning has no fixed training set, so ``fit`` takes no data:
the environment is described by constructor parameters and experience is
collected during fitting. ``predict`` and ``predict_order`` act on batches of
joint observations.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from . import autodiff as ad
from ._validation import NotFittedError, check_observations
from .envs import EnvSpec
from .policy import ModelConfig, OrderingStrategy, Policy, encode, score_credits, select_order
from .training import TrainConfig, evaluate, train_loop


class OrderedPolicyEstimator(BaseEstimator):
    """Transformer policy with a learned, fixed or random decision order."""

    def __init__(self, env_kind: str = "key-agent-match", n_agents: int = 3, n_actions: int = 3,
                 strategy: str = "learned-pl", fixed_order: Optional[tuple] = None,
                 d_model: int = 64, n_heads: int = 1, n_blocks: int = 1,
                 total_env_steps: int = 38_400, n_rollout_threads: int = 128, episode_length: int = 1,
                 ppo_epochs: int = 10, lr: float = 5e-4, clip_eps: float = 0.05, entropy_coef: float = 0.01,
                 ranking_loss_coef: float = 1e-2, normalize_advantages: bool = False,
                 gamma: float = 0.99, gae_lambda: float = 0.95, dtype: str = "float32",
                 random_state: Optional[int] = None):
        self.env_kind = env_kind
        self.n_agents = n_agents
        self.n_actions = n_actions
        self.strategy = strategy
        self.fixed_order = fixed_order
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.total_env_steps = total_env_steps
        self.n_rollout_threads = n_rollout_threads
        self.episode_length = episode_length
        self.ppo_epochs = ppo_epochs
        self.lr = lr
        self.clip_eps = clip_eps
        self.entropy_coef = entropy_coef
        self.ranking_loss_coef = ranking_loss_coef
        self.normalize_advantages = normalize_advantages
        self.gamma = gamma
        self.gae_lambda = gae_lambda
        self.dtype = dtype
        self.random_state = random_state

    def _env_spec(self) -> EnvSpec:
        return EnvSpec(kind=self.env_kind, n_agents=self.n_agents, n_actions=self.n_actions,
                       max_episode_steps=self.episode_length)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(gamma=self.gamma, gae_lambda=self.gae_lambda, clip_eps=self.clip_eps,
                           ppo_epochs=self.ppo_epochs, lr=self.lr, entropy_coef=self.entropy_coef,
                           ranking_loss_coef=self.ranking_loss_coef,
                           normalize_advantages=self.normalize_advantages,
                           episode_length=self.episode_length, n_rollout_threads=self.n_rollout_threads)

    def fit(self, X=None, y=None, workers: int = 1):
        """Train by interacting with the configured environment. ``X`` and ``y`` are ignored."""
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype: must be float32 or float64, got {self.dtype!r}")
        if self.total_env_steps < 1:
            raise ValueError("total_env_steps: must be >= 1")
        spec = self._env_spec()
        tcfg = self._train_config()
        fixed = tuple(self.fixed_order) if self.fixed_order is not None else None
        strategy = OrderingStrategy(self.strategy, fixed)
        cfg = ModelConfig(spec.n_agents, spec.obs_dim, spec.n_actions, self.d_model, self.n_heads, self.n_blocks)
        init_seq, train_seq, env_seq = np.random.SeedSequence(self.random_state).spawn(3)
        dtype = np.float32 if self.dtype == "float32" else np.float64
        self.policy_ = Policy(cfg, strategy, rng=np.random.default_rng(init_seq), dtype=dtype)
        self.env_spec_ = spec
        self.history_ = train_loop(self.policy_, spec, tcfg, self.total_env_steps,
                                   np.random.default_rng(train_seq), int(env_seq.generate_state(1)[0]), workers)
        self.n_iter_ = len(self.history_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "policy_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict(self, X, random_state=None) -> np.ndarray:
        """Greedy joint actions under the inference-time order, shape (batch, n_agents)."""
        self._check_fitted()
        X = check_observations(X, self.policy_.cfg.n_agents, self.policy_.cfg.obs_dim)
        return self.policy_.act(X, random_state, mode="infer").actions

    def predict_order(self, X, random_state=None) -> np.ndarray:
        """Decision order per joint observation, shape (batch, n_agents)."""
        self._check_fitted()
        X = check_observations(X, self.policy_.cfg.n_agents, self.policy_.cfg.obs_dim)
        with ad.no_grad():
            reps, _ = encode(self.policy_.store, X, self.policy_.cfg)
            credits = score_credits(self.policy_.store, reps, self.policy_.cfg).data
        return np.asarray(select_order(credits, self.policy_.strategy, "infer", random_state).permutation)

    def decision_credits(self, X) -> np.ndarray:
        self._check_fitted()
        X = check_observations(X, self.policy_.cfg.n_agents, self.policy_.cfg.obs_dim)
        with ad.no_grad():
            reps, _ = encode(self.policy_.store, X, self.policy_.cfg)
            return score_credits(self.policy_.store, reps, self.policy_.cfg).data

    def score(self, X=None, y=None, episodes: int = 1000, seed: int = 0) -> float:
        """Mean return of deterministic evaluation episodes."""
        self._check_fitted()
        return evaluate(self.policy_, self.env_spec_, episodes, seed)["mean_return"]
