import itertools
import time

import numpy as np
import pytest

from plmarl._validation import SizeError
from plmarl.envs import EnvSpec, TabularGame, key_agent_of_state, random_tabular_game, tabular_from_spec
from plmarl.oracle import (
    argmax_set,
    bellman_residual,
    exact_values,
    first_mover_certificate,
    multi_agent_advantage,
    optimal_order_search,
    oracle_report,
    q_marginal,
    uniform_policy,
    verify_decomposition,
)


def random_game(rng, n=None, a=None, s=None):
    n = n or int(rng.integers(1, 4))
    a = a or int(rng.integers(1, 4))
    s = s or int(rng.integers(1, 5))
    j = a ** n
    trans = rng.dirichlet(np.ones(s), size=(s, j))
    trans /= trans.sum(-1, keepdims=True)
    return TabularGame(n, a, rng.normal(size=(s, j)), trans, float(rng.uniform(0, 0.95)), np.full(s, 1 / s))


def random_policy(rng, game):
    return rng.dirichlet(np.ones(game.n_actions), size=(game.n_agents, game.n_states))


def brute_q_marginal(values, game, s, agents, actions):
    """Explicit sum over every joint action, weighting outside agents by their policy."""
    total = 0.0
    for joint in itertools.product(range(game.n_actions), repeat=game.n_agents):
        if any(joint[i] != a for i, a in zip(agents, actions)):
            continue
        w = np.prod([values.policy[i, s, joint[i]] for i in range(game.n_agents) if i not in agents])
        total += w * values.Q[(s,) + joint]
    return total


class TestExactValues:
    def test_myopic(self):
        rng = np.random.default_rng(0)
        game = random_game(rng, 2, 2, 3)
        game.gamma = 0.0
        pi = random_policy(rng, game)
        v = exact_values(game, pi)
        for s in range(3):
            expect = sum(pi[0, s, a] * pi[1, s, b] * game.rewards[s, 2 * a + b] for a in range(2) for b in range(2))
            assert v.V[s] == pytest.approx(expect, abs=1e-14)

    def test_geometric(self):
        game = TabularGame(1, 1, [[0.7]], [[[1.0]]], 0.9, [1.0])
        assert exact_values(game).V[0] == pytest.approx(7.0, abs=1e-9)

    def test_bellman_residual(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            game = random_game(rng, 2, None, 3)
            v = exact_values(game, random_policy(rng, game))
            assert bellman_residual(v, game) < 1e-9

    def test_linear_solve_agrees(self):
        rng = np.random.default_rng(2)
        game = random_game(rng, 2, 2, 4)
        game.gamma = 0.9
        pi = random_policy(rng, game)
        v = exact_values(game, pi)
        from plmarl.oracle import joint_policy
        jp = joint_policy(game, pi)
        r = (jp * game.rewards).sum(1)
        p = np.einsum("sj,sjt->st", jp, game.transitions)
        np.testing.assert_allclose(v.V, np.linalg.solve(np.eye(4) - 0.9 * p, r), atol=1e-9)

    def test_bad_policy(self):
        game = tabular_from_spec(EnvSpec(n_agents=2, n_actions=2))
        pi = uniform_policy(game)
        pi[0, 0, 0] = 0.9
        with pytest.raises(ValueError, match="policy"):
            exact_values(game, pi)


class TestAdvantage:
    def test_q_marginal_matches_brute_force(self):
        rng = np.random.default_rng(3)
        game = random_game(rng, 3, 2, 2)
        v = exact_values(game, random_policy(rng, game))
        for agents in ([], [0], [2], [1, 2], [0, 1, 2], [2, 0]):
            acts = list(rng.integers(0, 2, size=len(agents)))
            assert q_marginal(v, 1, agents, acts) == pytest.approx(brute_q_marginal(v, game, 1, agents, acts), abs=1e-12)

    def test_empty_new_set(self):
        game = tabular_from_spec(EnvSpec())
        v = exact_values(game)
        assert multi_agent_advantage(v, game, 0, [0], [1], [], []) == 0.0

    def test_full_set_is_q_minus_v(self):
        rng = np.random.default_rng(4)
        game = random_game(rng, 2, 3, 2)
        v = exact_values(game, random_policy(rng, game))
        adv = multi_agent_advantage(v, game, 1, [], [], [1, 0], [2, 0])
        assert adv == pytest.approx(v.Q[1, 0, 2] - v.V[1], abs=1e-9)

    def test_overlap_rejected(self):
        game = tabular_from_spec(EnvSpec())
        with pytest.raises(ValueError):
            multi_agent_advantage(exact_values(game), game, 0, [0, 1], [0, 0], [1], [0])


class TestDecomposition:
    def test_random_games(self):
        rng = np.random.default_rng(5)
        start = time.time()
        worst = 0.0
        for _ in range(100):
            game = random_game(rng)
            v = exact_values(game, random_policy(rng, game))
            for s in range(game.n_states):
                for order in itertools.permutations(range(game.n_agents)):
                    for joint in game.joint_actions():
                        worst = max(worst, verify_decomposition(v, game, s, order, joint))
        assert worst < 1e-9
        assert time.time() - start < 60

    def test_single_action_exact_zero(self):
        game = TabularGame(2, 1, [[0.3]], [[[1.0]]], 0.5, [1.0])
        v = exact_values(game)
        for order in ([0, 1], [1, 0]):
            assert verify_decomposition(v, game, 0, order, [0, 0]) == 0.0

    def test_key_agent_all_orders(self):
        game = tabular_from_spec(EnvSpec())
        rep = oracle_report(game)
        assert rep["decomposition_residual"]["exhaustive"]
        assert rep["decomposition_residual"]["max"] < 1e-9


class TestOrderSearch:
    def test_key_agent_two(self):
        spec = EnvSpec(n_agents=2, n_actions=2)
        game = tabular_from_spec(spec)
        v = exact_values(game)
        for s in range(4):
            key = int(key_agent_of_state(spec, s))
            evals, best = optimal_order_search(v, game, s)
            adv = {e.order: e.joint_advantage for e in evals}
            key_first = adv[(key, 1 - key)]
            assert key_first == max(adv.values())
            if s % 2 == 1:  # target 1: follower's lowest-id guess is wrong when moving first
                assert best.order[0] == key and key_first > adv[(1 - key, key)]
        cert = first_mover_certificate(oracle_report(game), key_agent_of_state(spec, range(4)))
        assert cert["certified"]

    def test_key_agent_three(self):
        spec = EnvSpec(n_agents=3, n_actions=3)
        rep = oracle_report(tabular_from_spec(spec))
        cert = first_mover_certificate(rep, key_agent_of_state(spec, range(9)))
        assert cert["certified"] and cert["mean_gap"] > 0
        wrong = first_mover_certificate(rep, [(k + 1) % 3 for k in key_agent_of_state(spec, range(9))])
        assert not wrong["certified"]

    def test_joint_guess_order_insensitive(self):
        for n, a in ((2, 2), (3, 3)):
            rep = oracle_report(tabular_from_spec(EnvSpec(kind="joint-guess", n_agents=n, n_actions=a)))
            assert rep["order_insensitive"] and rep["max_order_spread"] < 1e-9

    def test_single_agent(self):
        game = random_tabular_game(EnvSpec(kind="tabular-generic", n_agents=1, n_actions=3))
        v = exact_values(game)
        evals, best = optimal_order_search(v, game, 0)
        assert len(evals) == 1 and best.order == (0,)
        assert best.best_response_actions == (int(np.argmax(v.Q[0])),)

    def test_greedy_actions_consistent(self):
        rng = np.random.default_rng(6)
        game = random_game(rng, 3, 2, 2)
        v = exact_values(game)
        evals, _ = optimal_order_search(v, game, 0)
        for e in evals:
            joint = list(e.best_response_actions)
            assert e.joint_advantage == pytest.approx(v.Q[(0,) + tuple(joint)] - v.V[0], abs=1e-9)

    def test_shift_invariant_argmax(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            game = random_game(rng, 3, 2, 3)
            shifted = TabularGame(3, 2, game.rewards + 5.0, game.transitions, game.gamma, game.initial)
            for s in range(3):
                _, a = optimal_order_search(exact_values(game), game, s)
                _, b = optimal_order_search(exact_values(shifted), shifted, s)
                assert a.order == b.order

    def test_size_guard(self):
        game = TabularGame(7, 1, np.zeros((1, 1)), np.ones((1, 1, 1)), 0.0, [1.0])
        with pytest.raises(SizeError):
            optimal_order_search(exact_values(game), game, 0)

    def test_argmax_set_lexicographic(self):
        game = tabular_from_spec(EnvSpec(kind="joint-guess", n_agents=3, n_actions=2))
        evals, best = optimal_order_search(exact_values(game), game, 0)
        assert best.order == (0, 1, 2) and len(argmax_set(evals)) == 6
