import json
import math

import numpy as np
import pytest

from conftest import random_mdp, two_state_mdp
from informed_rl.envs import make_riverswim
from informed_rl.mdp import (
    ConvergenceError,
    DeterministicPolicy,
    Mdp,
    StochasticPolicy,
    ValidationError,
    action_gap,
    bellman_residual,
    bias_span,
    enumerate_policies,
    greedy,
    is_communicating,
    policy_gain,
    solve_avg_reward,
)


def cesaro_gain(mdp, policy, squarings=80):
    """Oracle: average reward from the Cesaro limit matrix of the induced chain.

    The lazy chain ``(I + P) / 2`` is aperiodic with the same limit, so its
    powers converge; repeated squaring reaches ``2**80`` steps.
    """
    pi = DeterministicPolicy(policy).matrix(mdp.num_actions)
    P = np.einsum("sa,sat->st", pi, mdp.transitions)
    r = (pi * mdp.rewards).sum(axis=1)
    L = 0.5 * (np.eye(P.shape[0]) + P)
    for _ in range(squarings):
        L = L @ L
        L /= L.sum(axis=1, keepdims=True)  # stop rounding drift from compounding
    return float(mdp.initial_dist @ L @ r)


def test_single_state_self_loop():
    mdp = Mdp(np.ones((1, 1, 1)), np.array([[0.7]]), np.array([1.0]))
    sol = solve_avg_reward(mdp)
    assert sol.gain == pytest.approx(0.7, abs=1e-12)
    assert sol.bias.tolist() == [0.0]
    assert sol.residual == pytest.approx(0.0, abs=1e-15)
    assert bias_span(sol) == 0.0
    assert policy_gain(mdp, [0]) == pytest.approx(0.7)


def test_two_state_example(two_state):
    sol = solve_avg_reward(two_state)
    assert sol.gain == pytest.approx(1.0, abs=1e-10)
    assert sol.policy.tolist() == [0, 1]
    # v(0) = v(1) - 1 from the Bellman equation at state 0
    assert sol.bias == pytest.approx([0.0, 1.0], abs=1e-9)
    assert bias_span(sol) == pytest.approx(1.0, abs=1e-9)
    gains = {tuple(p): policy_gain(two_state, p) for p in enumerate_policies(2, 2)}
    assert max(gains, key=gains.get) == (0, 1)
    assert gains[(0, 1)] == pytest.approx(1.0)
    # stay-stay splits by the uniform start: half the mass is stuck at state 0
    assert gains[(1, 1)] == pytest.approx(0.5)
    assert gains[(0, 0)] == pytest.approx(0.0)


def test_policy_gain_stochastic_uniform(two_state):
    # uniform policy: symmetric chain with stationary (1/2, 1/2), reward 1/2 at state 1
    g = policy_gain(two_state, StochasticPolicy(np.full((2, 2), 0.5)))
    assert g == pytest.approx(0.25, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_policy_gain_matches_cesaro_average(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 3, 2, sparse=True)
    for p in enumerate_policies(3, 2):
        assert policy_gain(mdp, p) == pytest.approx(cesaro_gain(mdp, p), abs=1e-9)


def test_riverswim_enumeration():
    mdp = make_riverswim(6)
    sol = solve_avg_reward(mdp)
    best = max(policy_gain(mdp, p) for p in enumerate_policies(6, 2))
    assert sol.gain == pytest.approx(best, abs=1e-8)
    assert sol.policy.tolist() == [1] * 6
    assert action_gap(sol) > 0


@pytest.mark.parametrize("seed", range(20))
def test_planner_matches_enumeration_and_residual(seed):
    rng = np.random.default_rng(1000 + seed)
    S, A = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    mdp = random_mdp(rng, S, A)
    sol = solve_avg_reward(mdp)
    best = max(policy_gain(mdp, p) for p in enumerate_policies(S, A))
    assert abs(sol.gain - best) <= 1e-8
    assert bellman_residual(mdp, sol.gain, sol.bias) <= 1e-10
    assert sol.bias.min() == 0.0
    assert policy_gain(mdp, sol.policy) == pytest.approx(sol.gain, abs=1e-8)
    for s in range(S):
        assert sol.qvalues[s, sol.policy[s]] >= sol.qvalues[s].max() - 1e-9


def test_periodic_chain_converges():
    # deterministic 3-cycle: the undamped iteration would oscillate
    P = np.zeros((3, 1, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
    r = np.array([[1.0], [0.0], [0.5]])
    mdp = Mdp(P, r, np.full(3, 1 / 3))
    sol = solve_avg_reward(mdp)
    assert sol.gain == pytest.approx(0.5, abs=1e-10)
    assert policy_gain(mdp, [0, 0, 0]) == pytest.approx(0.5)


def test_determinism():
    mdp = random_mdp(np.random.default_rng(7), 4, 3)
    a, b = solve_avg_reward(mdp), solve_avg_reward(mdp)
    assert a.gain == b.gain and a.residual == b.residual
    assert np.array_equal(a.bias, b.bias) and np.array_equal(a.qvalues, b.qvalues)
    assert np.array_equal(a.policy, b.policy)


def test_tie_break_lowest_index_and_storage_order():
    rng = np.random.default_rng(3)
    base = random_mdp(rng, 3, 1)
    # three copies of the same action: every state ties, lowest index must win
    P = np.repeat(base.transitions, 3, axis=1)
    r = np.repeat(base.rewards, 3, axis=1)
    mdp = Mdp(P, r, base.initial_dist)
    assert solve_avg_reward(mdp).policy.tolist() == [0, 0, 0]
    fortran = Mdp(np.asfortranarray(P), np.asfortranarray(r), base.initial_dist)
    assert np.array_equal(solve_avg_reward(fortran).policy, solve_avg_reward(mdp).policy)
    assert greedy(np.array([[1.0, 1.0 + 1e-12, 0.0]]), tie_tol=1e-9).tolist() == [0]


def test_convergence_error_carries_residual():
    mdp = random_mdp(np.random.default_rng(0), 3, 2)
    with pytest.raises(ConvergenceError) as info:
        solve_avg_reward(mdp, max_iters=2)
    assert info.value.residual > 0
    assert info.value.iterations == 2


def test_validation():
    P = np.full((2, 1, 2), 0.5)
    with pytest.raises(ValidationError):
        Mdp(P * 1.1, np.zeros((2, 1)), np.array([0.5, 0.5]))
    with pytest.raises(ValidationError):
        Mdp(P, np.full((2, 1), 1.5), np.array([0.5, 0.5]))
    with pytest.raises(ValidationError):
        Mdp(P, np.zeros((2, 1)), np.array([0.5, 0.6]))
    with pytest.raises(ValidationError):
        DeterministicPolicy(np.array([0, 2])).matrix(2)


def test_json_round_trip():
    mdp = random_mdp(np.random.default_rng(11), 3, 2)
    doc = json.loads(mdp.to_json())
    assert set(doc) >= {"num_states", "num_actions", "transitions", "rewards", "initial_dist"}
    back = Mdp.from_json(mdp.to_json())
    assert np.abs(back.transitions - mdp.transitions).max() <= 1e-12
    assert np.abs(back.rewards - mdp.rewards).max() <= 1e-12


def test_is_communicating():
    assert is_communicating(two_state_mdp())
    P = np.zeros((2, 1, 2))
    P[0, 0, 1] = 1.0
    P[1, 0, 1] = 1.0  # state 1 absorbing
    assert not is_communicating(Mdp(P, np.zeros((2, 1)), np.array([1.0, 0.0])))


def test_action_gap_examples():
    from informed_rl.mdp import PlanSolution

    def sol(q):
        q = np.asarray(q, dtype=float)
        return PlanSolution(0.0, np.zeros(q.shape[0]), q, greedy(q), 0.0, 1)

    assert action_gap(sol([[1.0, 0.2, 0.2]])) == pytest.approx(0.8)
    assert action_gap(sol([[1.0, 1.0, 0.0], [2.0, 0.0, 0.0]])) == 0.0
    with pytest.raises(ValueError):
        action_gap(sol([[1.0]]))
    assert math.isclose(action_gap(solve_avg_reward(two_state_mdp())), 1.0, abs_tol=1e-9)
