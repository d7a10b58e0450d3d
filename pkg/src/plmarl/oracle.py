"""Exact tabular ground truth: values, multi-agent advantages and order search.

Policies here are independent per agent, given as an array of shape
``(n_agents, n_states, n_actions)``. Q-marginals over agents outside a subset
are exact expectations under those per-agent policies.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ._validation import SizeError
from .envs import TabularGame

MAX_ORDER_AGENTS = 6
TIE_TOL = 1e-12


@dataclass
class ExactValues:
    V: np.ndarray        # (S,)
    Q: np.ndarray        # (S, A, ..., A)
    policy: np.ndarray   # (n, S, A)
    iterations: int


@dataclass(frozen=True)
class OrderEvaluation:
    order: tuple
    joint_advantage: float
    best_response_actions: tuple


def uniform_policy(game: TabularGame) -> np.ndarray:
    return np.full((game.n_agents, game.n_states, game.n_actions), 1.0 / game.n_actions)


def _check_policy(game, policy) -> np.ndarray:
    pi = np.asarray(policy, dtype=np.float64)
    shape = (game.n_agents, game.n_states, game.n_actions)
    if pi.shape != shape:
        raise ValueError(f"policy: expected shape {shape}, got {pi.shape}")
    if np.any(pi < 0) or np.max(np.abs(pi.sum(-1) - 1)) > 1e-9:
        raise ValueError("policy: rows must be probability distributions")
    return pi


def joint_policy(game: TabularGame, policy) -> np.ndarray:
    """Product distribution over flattened joint actions, shape (S, A**n)."""
    pi = _check_policy(game, policy)
    out = np.ones((game.n_states, 1))
    for i in range(game.n_agents):
        out = (out[:, :, None] * pi[i][:, None, :]).reshape(game.n_states, -1)
    return out


def exact_values(game: TabularGame, policy=None, tol: float = 1e-10, max_iter: int = 100_000) -> ExactValues:
    """Iterate ``V = R_pi + gamma P_pi V`` until the sup-norm update drops below ``tol``."""
    pi = uniform_policy(game) if policy is None else _check_policy(game, policy)
    jp = joint_policy(game, pi)
    r_pi = np.einsum("sj,sj->s", jp, game.rewards)
    p_pi = np.einsum("sj,sjt->st", jp, game.transitions)
    v = np.zeros(game.n_states)
    it = 0
    for it in range(1, max_iter + 1):
        new = r_pi + game.gamma * p_pi @ v
        delta = np.max(np.abs(new - v))
        v = new
        # stop once the remaining geometric tail is below tol
        if delta * game.gamma / (1 - game.gamma) < tol or delta == 0:
            break
    q = game.rewards + game.gamma * game.transitions @ v
    q = q.reshape((game.n_states,) + (game.n_actions,) * game.n_agents)
    return ExactValues(v, q, pi, it)


def bellman_residual(values: ExactValues, game: TabularGame) -> float:
    """Independent recomputation of ``max |V - E_pi[R + gamma P V]|``."""
    jp = joint_policy(game, values.policy)
    target = np.einsum("sj,sj->s", jp, game.rewards + game.gamma * game.transitions @ values.V)
    return float(np.max(np.abs(values.V - target)))


def q_marginal(values: ExactValues, s: int, agents: Sequence[int], actions: Sequence[int]) -> float:
    """E over agents outside ``agents`` of Q(s, .) with ``agents`` pinned to ``actions``."""
    q = values.Q[s]
    n = q.ndim
    fixed = dict(zip((int(i) for i in agents), (int(a) for a in actions)))
    # contract from the last axis so remaining axis numbers stay valid
    for i in reversed(range(n)):
        if i in fixed:
            q = np.take(q, fixed[i], axis=i)
        else:
            q = np.tensordot(q, values.policy[i, s], axes=([i], [0]))
    return float(q)


def multi_agent_advantage(values: ExactValues, game: TabularGame, s: int,
                          prefix_agents: Sequence[int], prefix_actions: Sequence[int],
                          new_agents: Sequence[int], new_actions: Sequence[int]) -> float:
    pa, na = [int(i) for i in prefix_agents], [int(i) for i in new_agents]
    if len(pa) != len(prefix_actions) or len(na) != len(new_actions):
        raise ValueError("agents and actions must have matching lengths")
    if set(pa) & set(na) or len(set(pa)) != len(pa) or len(set(na)) != len(na):
        raise ValueError("prefix_agents and new_agents must be disjoint sets")
    if any(not 0 <= i < game.n_agents for i in pa + na):
        raise ValueError("agent ids out of range")
    if not na:
        return 0.0
    both = q_marginal(values, s, pa + na, list(prefix_actions) + list(new_actions))
    return both - q_marginal(values, s, pa, prefix_actions)


def verify_decomposition(values: ExactValues, game: TabularGame, s: int, order, joint_action) -> float:
    """|joint advantage - sum of sequential single-agent advantages| along ``order``."""
    order = [int(i) for i in order]
    acts = [int(joint_action[i]) for i in order]
    total = multi_agent_advantage(values, game, s, [], [], order, acts)
    parts = sum(
        multi_agent_advantage(values, game, s, order[:k], acts[:k], [order[k]], [acts[k]])
        for k in range(len(order))
    )
    return abs(total - parts)


def _greedy(values, game, s, order):
    chosen = []
    for k, agent in enumerate(order):
        adv = np.array([
            multi_agent_advantage(values, game, s, order[:k], chosen, [agent], [b])
            for b in range(game.n_actions)
        ])
        chosen.append(int(np.flatnonzero(adv >= adv.max() - TIE_TOL)[0]))
    joint = [0] * game.n_agents
    for agent, a in zip(order, chosen):
        joint[agent] = a
    return tuple(joint), multi_agent_advantage(values, game, s, [], [], list(order), chosen)


def optimal_order_search(values: ExactValues, game: TabularGame, s: int, mode: str = "greedy-sequential"):
    """Evaluate every order by greedy sequential best response.

    Returns ``(evaluations, argmax)``; evaluations are in lexicographic order
    and the argmax takes the first order within ``TIE_TOL`` of the maximum.
    """
    if mode != "greedy-sequential":
        raise ValueError(f"mode: unsupported search mode {mode!r}")
    if game.n_agents > MAX_ORDER_AGENTS:
        raise SizeError(f"order search enumerates n! orders; n={game.n_agents} exceeds {MAX_ORDER_AGENTS}")
    evals = []
    for order in itertools.permutations(range(game.n_agents)):
        joint, adv = _greedy(values, game, s, list(order))
        evals.append(OrderEvaluation(order, adv, joint))
    best = max(e.joint_advantage for e in evals)
    argmax = next(e for e in evals if e.joint_advantage >= best - TIE_TOL)
    return evals, argmax


def argmax_set(evals: Sequence[OrderEvaluation]) -> list:
    best = max(e.joint_advantage for e in evals)
    return [e.order for e in evals if e.joint_advantage >= best - TIE_TOL]


def decomposition_sweep(values: ExactValues, game: TabularGame, max_checks: int = 200_000,
                        rng: Optional[np.random.Generator] = None) -> dict:
    """Residual over every (state, order, joint action); subsampled past ``max_checks``."""
    orders = list(itertools.permutations(range(game.n_agents)))
    joints = game.joint_actions()
    total = game.n_states * len(orders) * len(joints)
    cells = itertools.product(range(game.n_states), range(len(orders)), range(len(joints)))
    if total > max_checks:
        rng = rng or np.random.default_rng(0)
        flat = rng.choice(total, size=max_checks, replace=False)
        cells = zip(*np.unravel_index(np.sort(flat), (game.n_states, len(orders), len(joints))))
    res = np.array([verify_decomposition(values, game, int(s), orders[o], joints[j]) for s, o, j in cells])
    return {"checks": int(res.size), "exhaustive": total <= max_checks,
            "max": float(res.max()), "mean": float(res.mean())}


def oracle_report(game: TabularGame, policy=None, state_labels: Optional[dict] = None) -> dict:
    """JSON-ready report: per-state order advantages, argmax, residual summary."""
    values = exact_values(game, policy)
    states = []
    spreads = []
    for s in range(game.n_states):
        evals, best = optimal_order_search(values, game, s)
        advs = [e.joint_advantage for e in evals]
        spreads.append(max(advs) - min(advs))
        entry = {
            "state": s,
            "V": float(values.V[s]),
            "orders": [
                {"order": list(e.order), "joint_advantage": e.joint_advantage,
                 "best_response_actions": list(e.best_response_actions)}
                for e in evals
            ],
            "argmax": list(best.order),
            "argmax_set": [list(o) for o in argmax_set(evals)],
        }
        if state_labels and s in state_labels:
            entry.update(state_labels[s])
        states.append(entry)
    sweep = decomposition_sweep(values, game)
    return {
        "n_agents": game.n_agents,
        "n_actions": game.n_actions,
        "n_states": game.n_states,
        "gamma": game.gamma,
        "bellman_residual": bellman_residual(values, game),
        "states": states,
        "decomposition_residual": sweep,
        "max_order_spread": float(max(spreads)),
        "order_insensitive": bool(max(spreads) < 1e-9),
    }


def first_mover_certificate(report: dict, agent_of_state) -> dict:
    """Check that placing a designated agent first is the optimal order class.

    ``agent_of_state[s]`` names the agent that should move first in state s.
    Greedy best response can tie across orders in some states (when the
    first mover's lowest-id choice happens to be right), so the certificate
    asks for: designated-first orders attain the maximum in every state, they
    are the only maximisers wherever orders differ at all, and they strictly
    beat the other orders on average over the initial-state distribution.
    """
    first_opt, unique_where_strict, gaps, strict_states = True, True, [], 0
    for entry in report["states"]:
        k = int(agent_of_state[entry["state"]])
        advs = {tuple(o["order"]): o["joint_advantage"] for o in entry["orders"]}
        best = max(advs.values())
        first = [v for o, v in advs.items() if o[0] == k]
        other = [v for o, v in advs.items() if o[0] != k]
        first_opt &= min(first) >= best - TIE_TOL
        if other and max(advs.values()) - min(advs.values()) > TIE_TOL:
            strict_states += 1
            unique_where_strict &= all(o[0] == k for o in map(tuple, entry["argmax_set"]))
        gaps.append(np.mean(first) - (np.mean(other) if other else np.mean(first)))
    mean_gap = float(np.mean(gaps))
    return {
        "first_orders_optimal_everywhere": bool(first_opt),
        "unique_where_order_matters": bool(unique_where_strict),
        "states_where_order_matters": strict_states,
        "mean_gap": mean_gap,
        "certified": bool(first_opt and unique_where_strict and strict_states > 0 and mean_gap > 0),
    }
