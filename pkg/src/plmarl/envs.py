"""Small cooperative Markov games with controllable order dependence.

All environments are batched: one instance steps ``n_envs`` independent copies
so rollouts stay vectorised. Observations have shape ``(n_envs, n_agents, obs_dim)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ._validation import check_random_state

KINDS = ("key-agent-match", "joint-guess", "tabular-generic")


@dataclass(frozen=True)
class EnvSpec:
    kind: str = "key-agent-match"
    n_agents: int = 3
    n_actions: int = 3
    max_episode_steps: int = 1
    # tabular-generic only
    n_states: int = 4
    game_seed: int = 0
    gamma: float = 0.9

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind: unsupported environment kind {self.kind!r}")
        lo = 1 if self.kind == "tabular-generic" else 2
        if int(self.n_agents) < lo:
            raise ValueError(f"n_agents: must be >= {lo} for {self.kind}, got {self.n_agents}")
        if int(self.n_actions) < 2:
            raise ValueError(f"n_actions: must be >= 2, got {self.n_actions}")
        if int(self.max_episode_steps) < 1:
            raise ValueError(f"max_episode_steps: must be >= 1, got {self.max_episode_steps}")
        if int(self.n_states) < 1:
            raise ValueError(f"n_states: must be >= 1, got {self.n_states}")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ValueError(f"gamma: must lie in [0, 1), got {self.gamma}")

    @property
    def obs_dim(self) -> int:
        if self.kind == "key-agent-match":
            return self.n_actions + 2
        if self.kind == "joint-guess":
            return self.n_actions
        return self.n_states

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TabularGame:
    """Finite Markov game with joint actions flattened agent-0-major."""

    n_agents: int
    n_actions: int
    rewards: np.ndarray      # (S, A**n)
    transitions: np.ndarray  # (S, A**n, S)
    gamma: float
    initial: np.ndarray      # (S,)

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.initial = np.asarray(self.initial, dtype=np.float64)
        s, j = self.rewards.shape
        if j != self.n_actions ** self.n_agents:
            raise ValueError("rewards: second axis must enumerate all joint actions")
        if self.transitions.shape != (s, j, s):
            raise ValueError(f"transitions: expected shape {(s, j, s)}, got {self.transitions.shape}")
        if not np.all(np.isfinite(self.rewards)):
            raise ValueError("rewards: must be finite")
        if np.any(self.transitions < 0) or np.max(np.abs(self.transitions.sum(-1) - 1)) > 1e-12:
            raise ValueError("transitions: rows must be distributions")
        if self.initial.shape != (s,) or abs(self.initial.sum() - 1) > 1e-12:
            raise ValueError("initial: must be a distribution over states")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma: must lie in [0, 1)")

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    def joint_index(self, actions) -> np.ndarray:
        a = np.asarray(actions)
        return np.ravel_multi_index(tuple(np.moveaxis(a, -1, 0)), (self.n_actions,) * self.n_agents)

    def joint_actions(self) -> np.ndarray:
        """All joint actions in flattened order, shape (A**n, n)."""
        grids = np.indices((self.n_actions,) * self.n_agents).reshape(self.n_agents, -1)
        return grids.T.copy()


def _check_joint_actions(actions, n_envs, n_agents, n_actions) -> np.ndarray:
    a = np.asarray(actions)
    if a.shape != (n_envs, n_agents):
        raise ValueError(f"actions: expected shape {(n_envs, n_agents)}, got {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        raise ValueError("actions: must be integer ids")
    if np.any(a < 0) or np.any(a >= n_actions):
        raise ValueError(f"actions: ids must lie in [0, {n_actions})")
    return a.astype(np.int64)


class BaseEnv:
    """Shared batching, episode counters and the reset/step contract."""

    def __init__(self, spec: EnvSpec, n_envs: int = 1):
        if int(n_envs) < 1:
            raise ValueError("n_envs: must be >= 1")
        self.spec = spec
        self.n_envs = int(n_envs)
        self.rng = None
        self.t = np.zeros(self.n_envs, dtype=np.int64)

    def reset(self, rng=None) -> np.ndarray:
        self.rng = check_random_state(rng)
        self.t[:] = 0
        self._draw(np.ones(self.n_envs, dtype=bool))
        return self.observe()

    def reset_done(self, done: np.ndarray) -> np.ndarray:
        """Start fresh episodes in the environments flagged by ``done``."""
        done = np.asarray(done, dtype=bool)
        self.t[done] = 0
        if done.any():
            self._draw(done)
        return self.observe()

    def step(self, actions):
        if self.rng is None:
            raise RuntimeError("step called before reset")
        a = _check_joint_actions(actions, self.n_envs, self.spec.n_agents, self.spec.n_actions)
        reward = self._reward(a)
        self.t += 1
        done = self.t >= self.spec.max_episode_steps
        self._transition(a, ~done)
        return self.observe(), reward, done

    def _transition(self, actions, alive):
        # default: independent redraw, so multi-step variants are iid rounds
        if alive.any():
            self._draw(alive)

    def _draw(self, mask):
        raise NotImplementedError

    def _reward(self, actions):
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError

    def state_index(self) -> np.ndarray:
        raise NotImplementedError


class KeyAgentMatch(BaseEnv):
    """One hidden key agent knows a target action; the rest should copy the key's move.

    Key agent observes ``[1, onehot(target), 0]``; others observe
    ``[0, 0..0, u]`` with ``u ~ U(0, 1)``.
    """

    def __init__(self, spec, n_envs=1):
        super().__init__(spec, n_envs)
        self.key = np.zeros(self.n_envs, dtype=np.int64)
        self.target = np.zeros(self.n_envs, dtype=np.int64)
        self.noise = np.zeros((self.n_envs, spec.n_agents))

    def _draw(self, mask):
        m = int(mask.sum())
        self.key[mask] = self.rng.integers(0, self.spec.n_agents, size=m)
        self.target[mask] = self.rng.integers(0, self.spec.n_actions, size=m)
        self.noise[mask] = self.rng.random((m, self.spec.n_agents))

    def observe(self):
        n, a = self.spec.n_agents, self.spec.n_actions
        obs = np.zeros((self.n_envs, n, a + 2))
        rows = np.arange(self.n_envs)
        obs[:, :, -1] = self.noise
        obs[rows, self.key, -1] = 0.0
        obs[rows, self.key, 0] = 1.0
        obs[rows, self.key, 1 + self.target] = 1.0
        return obs

    def _reward(self, actions):
        rows = np.arange(self.n_envs)
        key_action = actions[rows, self.key]
        hit = (key_action == self.target).astype(np.float64)
        copies = (actions == key_action[:, None]).sum(axis=1) - 1
        return 0.5 * hit + 0.5 * copies / (self.spec.n_agents - 1)

    def state_index(self):
        return self.key * self.spec.n_actions + self.target


class JointGuess(BaseEnv):
    """Every agent sees the shared target; reward 1 only if all play it."""

    def __init__(self, spec, n_envs=1):
        super().__init__(spec, n_envs)
        self.target = np.zeros(self.n_envs, dtype=np.int64)

    def _draw(self, mask):
        self.target[mask] = self.rng.integers(0, self.spec.n_actions, size=int(mask.sum()))

    def observe(self):
        onehot = np.eye(self.spec.n_actions)[self.target]
        return np.repeat(onehot[:, None, :], self.spec.n_agents, axis=1)

    def _reward(self, actions):
        return np.all(actions == self.target[:, None], axis=1).astype(np.float64)

    def state_index(self):
        return self.target.copy()


class TabularEnv(BaseEnv):
    """Simulator for an explicit TabularGame; observations are one-hot states."""

    def __init__(self, spec, n_envs=1, game: Optional[TabularGame] = None):
        super().__init__(spec, n_envs)
        self.game = game if game is not None else random_tabular_game(spec)
        self.state = np.zeros(self.n_envs, dtype=np.int64)
        self._cdf_init = np.cumsum(self.game.initial)

    def _sample(self, cdf, u):
        idx = (u[:, None] > cdf).sum(axis=-1)
        return np.minimum(idx, self.game.n_states - 1)

    def _draw(self, mask):
        u = self.rng.random(int(mask.sum()))
        self.state[mask] = self._sample(self._cdf_init[None, :], u)

    def _reward(self, actions):
        self._joint = self.game.joint_index(actions)
        return self.game.rewards[self.state, self._joint]

    def _transition(self, actions, alive):
        if alive.any():
            cdf = np.cumsum(self.game.transitions[self.state[alive], self._joint[alive]], axis=-1)
            u = self.rng.random(int(alive.sum()))
            self.state[alive] = (u[:, None] > cdf).sum(axis=-1).clip(max=self.game.n_states - 1)

    def observe(self):
        onehot = np.eye(self.game.n_states)[self.state]
        return np.repeat(onehot[:, None, :], self.spec.n_agents, axis=1)

    def state_index(self):
        return self.state.copy()


def random_tabular_game(spec: EnvSpec) -> TabularGame:
    """Random game from ``spec.game_seed``: U(0,1) rewards, Dirichlet transitions."""
    rng = np.random.default_rng(spec.game_seed)
    s, j = spec.n_states, spec.n_actions ** spec.n_agents
    rewards = rng.random((s, j))
    transitions = rng.dirichlet(np.ones(s), size=(s, j))
    # renormalise so rows sum to 1 to within rounding of a single division
    transitions /= transitions.sum(-1, keepdims=True)
    return TabularGame(spec.n_agents, spec.n_actions, rewards, transitions, spec.gamma, np.full(s, 1.0 / s))


def make_env(spec: EnvSpec, n_envs: int = 1) -> BaseEnv:
    if spec.kind == "key-agent-match":
        return KeyAgentMatch(spec, n_envs)
    if spec.kind == "joint-guess":
        return JointGuess(spec, n_envs)
    return TabularEnv(spec, n_envs)


def key_agent_of_state(spec: EnvSpec, s) -> np.ndarray:
    if spec.kind != "key-agent-match":
        raise ValueError("key_agent_of_state applies to key-agent-match only")
    return np.asarray(s) // spec.n_actions


def tabular_from_spec(spec: EnvSpec) -> TabularGame:
    """Exact table for a spec, matching the simulator's step semantics.

    One-step games get gamma 0: every round redraws the state independently of
    the action, so later rounds add a constant and cannot change any advantage.
    """
    if spec.kind == "tabular-generic":
        return random_tabular_game(spec)
    n, a = spec.n_agents, spec.n_actions
    joint = np.indices((a,) * n).reshape(n, -1).T
    if spec.kind == "key-agent-match":
        states = [(k, tau) for k in range(n) for tau in range(a)]
        rewards = np.empty((len(states), len(joint)))
        for i, (k, tau) in enumerate(states):
            ka = joint[:, k]
            copies = (joint == ka[:, None]).sum(axis=1) - 1
            rewards[i] = 0.5 * (ka == tau) + 0.5 * copies / (n - 1)
    elif spec.kind == "joint-guess":
        rewards = np.stack([np.all(joint == tau, axis=1).astype(np.float64) for tau in range(a)])
    else:
        raise ValueError(f"kind: no tabular form for {spec.kind!r}")
    s = rewards.shape[0]
    initial = np.full(s, 1.0 / s)
    transitions = np.broadcast_to(initial, (s, len(joint), s)).copy()
    return TabularGame(n, a, rewards, transitions, 0.0, initial)
