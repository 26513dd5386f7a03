import math

import numpy as np
import pytest

from informed_rl.envs import make_random_family, make_riverswim
from informed_rl.expert import Competence, OfflineDataset, expert_policy, generate_offline
from informed_rl.harness import stderr, stream
from informed_rl.ipsrl import EpisodeSchedule, Simulator, initial_state, schedule_lengths
from informed_rl.irlsvi import (
    LossHyper,
    OptimizationError,
    OptimOptions,
    QParams,
    build_loss,
    fixed_target_solution,
    imitation_loss,
    loss_value_and_grad,
    minimize_loss,
    run_irlsvi,
    running_avg,
    td_error,
    zero_noise,
)
from informed_rl.mdp import solve_avg_reward
from oracles import kl_imitation, map_loss, running_mean_rtilde

NO_ONLINE = np.zeros((0, 3), dtype=np.int64)


def small_instance(seed, S=3, A=2, N=12, t=6, hyper=LossHyper()):
    rng = np.random.default_rng(seed)
    fam = make_random_family(S, A, 1, seed=seed)
    env = fam.members[0]
    pi = expert_policy(fam.plans[0].qvalues, Competence(2.0))
    data = generate_offline(env, pi, N, 0, rng)
    online = np.stack([rng.integers(0, S, t), rng.integers(0, A, t), rng.integers(0, S, t)], axis=1)
    return env, data, online, build_loss(data, online, env.rewards, hyper, rng)


def test_running_avg_examples():
    assert running_avg([0.4] * 5).tolist() == [0.4] * 6
    assert running_avg([1.0, 0.0, 1.0]) == pytest.approx([1.0, 1.0, 0.5, 2 / 3], abs=1e-15)
    assert running_avg([0.3, 0.9, 0.1], eta=lambda k: 0.0).tolist() == [0.3] * 4
    rng = np.random.default_rng(0)
    r = rng.random(50)
    assert running_avg(r) == pytest.approx(running_mean_rtilde(list(r)), abs=1e-13)
    with pytest.raises(ValueError):
        running_avg([])


def test_td_error_examples():
    assert td_error(QParams(np.zeros((2, 2))), (0, 1, 1, 0.4, 0.4)) == 0.0
    q = np.array([[1.5, 0.0], [2.0, -1.0]])
    assert td_error(QParams(q), (0, 0, 1, 0.3, 0.1)) == pytest.approx(0.7, abs=1e-15)


def test_offline_boundary_and_layout():
    _, data, online, real = small_instance(0)
    N = len(data)
    assert real.next_states[N - 1] == data.states[N]
    assert real.states[:N].tolist() == data.states[:-1].tolist()
    assert real.states[N:].tolist() == online[:, 0].tolist()
    assert real.td_noise.size == N + online.shape[0]
    assert real.imitation_weights.size == N
    assert real.rtilde == pytest.approx(running_avg(real.rewards), abs=0)


def test_build_loss_deterministic():
    a = small_instance(4)[3]
    b = small_instance(4)[3]
    for name in ("td_noise", "imitation_weights", "prior_anchor", "rtilde"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_rtilde_restart_switch():
    _, data, online, _ = small_instance(1)
    env = make_random_family(3, 2, 1, seed=1).members[0]
    real = build_loss(data, online, env.rewards, LossHyper(rtilde_offline=False), np.random.default_rng(0))
    N = len(data)
    assert real.rtilde[N:] == pytest.approx(running_avg(real.rewards[N:]), abs=0)
    assert real.rtilde[:N] == pytest.approx(running_avg(real.rewards[:N])[:N], abs=0)


def test_hand_evaluated_toy_loss():
    # 3-step offline data on 2 states, 3 actions; q = 0, beta = 0, zero draws
    rewards = np.array([[0.2, 0.5, 0.9], [0.0, 0.4, 1.0]])
    data = OfflineDataset([0, 1, 1, 0], [1, 2, 0])
    real = zero_noise(build_loss(data, NO_ONLINE, rewards, LossHyper(sigma=0.5), np.random.default_rng(0)))
    r = [0.5, 1.0, 0.0]
    rt = [0.5, 0.5, 0.75]
    expect = sum((ri - ti) ** 2 for ri, ti in zip(r, rt)) / (2 * 0.25) + 3 * math.log(3)
    value, _ = loss_value_and_grad(real, QParams(np.zeros((2, 3)), 0.0), np.zeros((2, 3)))
    assert value == pytest.approx(expect, abs=1e-14)


def test_empty_offline_has_no_imitation_term():
    rng = np.random.default_rng(5)
    rewards = rng.random((3, 2))
    online = np.array([[0, 1, 2], [2, 0, 1], [1, 1, 0]])
    real = build_loss(OfflineDataset.empty(0), online, rewards, LossHyper(), rng)
    q = rng.normal(size=(3, 2))
    v1, g1 = loss_value_and_grad(real, QParams(q, 0.5), q)
    v2, g2 = loss_value_and_grad(real, QParams(q, 3.0), q)
    # only lambda2 * beta depends on beta when N = 0
    assert v2 - v1 == pytest.approx(2.5 * real.hyper.lambda2, abs=1e-12)
    assert g1.beta == g2.beta == real.hyper.lambda2
    assert np.array_equal(g1.qtable, g2.qtable)


def test_negative_beta_rejected():
    _, _, _, real = small_instance(0)
    with pytest.raises(ValueError):
        loss_value_and_grad(real, QParams(np.zeros((3, 2)), -0.1), np.zeros((3, 2)))


def finite_difference_error(seed):
    """Max relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    S, A = int(rng.integers(2, 5)), int(rng.integers(1, 4))
    hyper = LossHyper(
        sigma=float(rng.uniform(0.5, 2.0)),
        lambda2=float(rng.uniform(0.1, 2.0)),
        prior_precision=rng.uniform(0.2, 2.0, size=(S, A)),
    )
    fam = make_random_family(S, A, 1, seed=seed, min_gap=0.0)
    env = fam.members[0]
    data = generate_offline(env, expert_policy(fam.plans[0].qvalues, Competence(1.0)), int(rng.integers(0, 30)), 0, rng)
    t = int(rng.integers(0, 20))
    online = np.stack([rng.integers(0, S, t), rng.integers(0, A, t), rng.integers(0, S, t)], axis=1)
    real = build_loss(data, online, env.rewards, hyper, rng)
    q = rng.normal(size=(S, A))
    beta = float(rng.uniform(0.5, 3.0))
    frozen = rng.normal(size=(S, A))
    _, g = loss_value_and_grad(real, QParams(q, beta), frozen)
    x = np.append(q.ravel(), beta)
    h = 1e-5
    fd = np.empty_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fp = loss_value_and_grad(real, QParams(xp[:-1].reshape(S, A), xp[-1]), frozen)[0]
        fm = loss_value_and_grad(real, QParams(xm[:-1].reshape(S, A), xm[-1]), frozen)[0]
        fd[i] = (fp - fm) / (2 * h)
    return float(np.abs(g.flat() - fd).max() / max(np.abs(fd).max(), 1e-8))


@pytest.mark.parametrize("seed", range(25))
def test_gradient_matches_finite_differences(seed):
    assert finite_difference_error(seed) <= 1e-5


def test_zero_randomness_equals_map_loss():
    hyper = LossHyper(sigma=0.7, lambda2=0.3, prior_precision=1.3)
    env, data, online, real = small_instance(3, hyper=hyper)
    real0 = zero_noise(real)
    n = real0.num_total
    rows = [(int(real0.states[k]), int(real0.actions[k]), int(real0.next_states[k]), float(real0.rewards[k])) for k in range(n)]
    rng = np.random.default_rng(8)
    pairs = [(rng.normal(size=(3, 2)), float(rng.uniform(0, 4))) for _ in range(6)]

    def ours(q, b):
        # frozen snapshot equal to q turns the smoothed loss back into the true-max loss
        return loss_value_and_grad(real0, QParams(q, b), q)[0]

    def ref(q, b):
        return map_loss(q.tolist(), b, rows, len(data), list(real0.rtilde), 0.7, 0.3, 1.3)

    base_ours, base_ref = ours(*pairs[0]), ref(*pairs[0])
    for q, b in pairs[1:]:
        assert abs((ours(q, b) - base_ours) - (ref(q, b) - base_ref)) <= 1e-9


def test_kl_identity():
    rng = np.random.default_rng(2)
    S, A = 4, 3
    states = rng.integers(0, S - 1, size=40)  # last state unvisited
    actions = rng.integers(0, A, size=40)
    pairs = [(rng.normal(size=(S, A)), float(rng.uniform(0, 5))) for _ in range(6)]
    ours = [imitation_loss(q, b, states, actions) for q, b in pairs]
    ref = [kl_imitation(q, b, states, actions, S, A) for q, b in pairs]
    for j in range(1, len(pairs)):
        assert abs((ours[j] - ours[0]) - (ref[j] - ref[0])) <= 1e-9


def fixed_target_normal_equations(real, S):
    """Per-datum assembly of (Prec + D/s2 - B/s2) q = Prec anchor + C/s2 for one action."""
    s2 = real.hyper.sigma**2
    M = np.zeros((S, S))
    rhs = np.zeros(S)
    for k in range(real.num_total):
        s, s_next = int(real.states[k]), int(real.next_states[k])
        c = real.rewards[k] + real.td_noise[k] - real.rtilde[k]
        M[s, s] += 1 / s2
        M[s, s_next] -= 1 / s2
        rhs[s] += c / s2
    prec = np.broadcast_to(real.hyper.prior_precision, (S, 1))[:, 0]
    M += np.diag(prec)
    rhs += prec * real.prior_anchor[:, 0]
    return np.linalg.solve(M, rhs)


def test_single_action_converges_to_closed_form():
    rng = np.random.default_rng(6)
    S = 4
    rewards = rng.random((S, 1))
    online = np.stack([rng.integers(0, S, 30), np.zeros(30, dtype=int), rng.integers(0, S, 30)], axis=1)
    real = build_loss(OfflineDataset.empty(0), online, rewards, LossHyper(prior_precision=0.5), rng)
    oracle = fixed_target_normal_equations(real, S)
    assert fixed_target_solution(real)[:, 0] == pytest.approx(oracle, abs=1e-12)
    p = minimize_loss(real, QParams(np.zeros((S, 1)), 0.0), OptimOptions(outer_iters=300, inner_iters=500, learning_rate=0.1))
    assert np.abs(p.qtable[:, 0] - oracle).max() <= 1e-6


def test_backtracking_descent_contract():
    _, _, _, real = small_instance(9)
    history = []
    minimize_loss(real, QParams(np.zeros((3, 2)), 1.0), OptimOptions(outer_iters=4, inner_iters=50, learning_rate=5.0), history)
    assert len(history) == 4
    for losses in history:
        assert all(b <= a for a, b in zip(losses, losses[1:]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    from dataclasses import replace

    _, _, _, real = small_instance(0)
    broken = replace(real, td_noise=np.full_like(real.td_noise, np.inf))
    with pytest.raises(OptimizationError) as info:
        minimize_loss(broken, QParams(np.zeros((3, 2)), 1.0))
    assert info.value.iteration >= 1
    with pytest.raises(ValueError):
        minimize_loss(real, QParams(np.zeros((3, 2))), OptimOptions(learning_rate=0.0))


def test_entropy_beta_switch():
    env, data, online, _ = small_instance(2)
    hyper = LossHyper(beta_est="entropy", c0=1.5, beta_cap=20.0)
    real = build_loss(data, online, env.rewards, hyper, np.random.default_rng(0))
    from informed_rl.expert import entropy_beta_estimate

    expected = entropy_beta_estimate(data, 1.5, 20.0, 3, 2)
    assert real.fixed_beta == pytest.approx(expected)
    p = minimize_loss(real, QParams(np.zeros((3, 2)), 7.0), OptimOptions(outer_iters=2, inner_iters=20))
    assert p.beta == pytest.approx(expected)


def test_recovers_optimal_policy_from_expert_data():
    assert perfect_offline_recovery(100) >= 90


def perfect_offline_recovery(seeds):
    """Count of seeds whose fitted greedy policy equals pi* from 1000 steps of a beta = 50 expert."""
    fam = make_random_family(3, 2, 1, min_prob=0.05, seed=3)
    env, plan = fam.members[0], fam.plans[0]
    hits = 0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        data = generate_offline(env, expert_policy(plan.qvalues, Competence(50.0)), 1000, 0, rng)
        real = build_loss(data, NO_ONLINE, env.rewards, LossHyper(), rng)
        p = minimize_loss(real, QParams(np.zeros((3, 2)), 1.0))
        hits += np.array_equal(p.greedy_policy(), plan.policy)
    return hits


def test_estimated_beta_tracks_expert_beta():
    fam = make_random_family(3, 2, 1, min_prob=0.05, seed=3)
    env, plan = fam.members[0], fam.plans[0]
    means, ses = [], []
    for true_beta in (0.5, 2.0, 8.0):
        est = np.empty(20)
        for seed in range(20):
            rng = np.random.default_rng(seed)
            data = generate_offline(env, expert_policy(plan.qvalues, Competence(true_beta)), 500, 0, rng)
            real = build_loss(data, NO_ONLINE, env.rewards, LossHyper(), rng)
            est[seed] = minimize_loss(real, QParams(np.zeros((3, 2)), 1.0)).beta
        means.append(est.mean())
        ses.append(stderr(est))
    for j in range(2):
        assert means[j + 1] >= means[j] - 3 * math.hypot(ses[j], ses[j + 1])


def test_horizon_consistency():
    env = make_random_family(3, 2, 1, seed=0).members[0]
    tr = run_irlsvi(env, None, EpisodeSchedule("linear"), 37, opts=OptimOptions(2, 10), rng=0)
    assert tr.horizon == 37 and tr.states.size == 38
    assert sum(e.length for e in tr.episodes) == 37
    assert len(tr.info["betas"]) == len(tr.episodes)


def test_pure_randomized_value_iteration_identity():
    """With imitation and prior off and N = 0 the agent is plain randomized value iteration."""
    env = make_random_family(3, 2, 1, seed=4).members[0]
    hyper = LossHyper(use_imitation=False, use_prior=False)
    opts = OptimOptions(3, 20)
    sched = EpisodeSchedule("linear")
    tr = run_irlsvi(env, None, sched, 60, hyper, opts, rng=11)

    rng = np.random.default_rng(11)
    sim = Simulator(env)
    states = np.empty(61, dtype=np.int64)
    actions = np.empty(60, dtype=np.int64)
    rewards = np.empty(60)
    s = initial_state(env, rng)
    states[0] = s
    q = np.zeros((3, 2))
    t = 0
    for T_k in schedule_lengths(sched, 60):
        online = np.stack([states[:t], actions[:t], states[1 : t + 1]], axis=1)
        real = build_loss(OfflineDataset.empty(0), online, env.rewards, hyper, rng)
        assert not real._W.any() and not real._prec.any()
        q = minimize_loss(real, QParams(q, 1.0), opts).qtable
        s = sim.rollout(q.argmax(axis=1).tolist(), s, rng.random(T_k).tolist(), states, actions, rewards, t)
        t += T_k
    assert np.array_equal(tr.states, states)
    assert np.array_equal(tr.actions, actions)


@pytest.mark.slow
def test_informative_data_lowers_regret_on_riverswim():
    mdp = make_riverswim(6)
    plan = solve_avg_reward(mdp)
    expert = expert_policy(plan.qvalues, Competence(10.0))
    opts = OptimOptions(outer_iters=3, inner_iters=50)
    T, seeds = 5000, 100
    regret = {0: np.empty(seeds), 500: np.empty(seeds)}
    for i in range(seeds):
        for n in regret:
            data = generate_offline(mdp, expert, n, 0, stream(99, 1, i), beta=10.0)
            tr = run_irlsvi(mdp, data, EpisodeSchedule("linear"), T, LossHyper(), opts, stream(99, 2, i))
            regret[n][i] = plan.gain * T - tr.rewards.sum()
    diff = regret[500] - regret[0]
    assert diff.mean() <= 2 * stderr(diff)
