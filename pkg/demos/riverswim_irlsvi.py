"""Randomized value iteration on RiverSwim, with and without expert data.

The expert (beta = 20) walks the river for 300 steps; the agent then learns
online for 2000 steps. Without data it has to discover that swimming right
pays off; with data the imitation term points it there from the start.

    python3 demos/riverswim_irlsvi.py
"""

import numpy as np

from informed_rl import (
    Competence,
    EpisodeSchedule,
    LossHyper,
    OfflineDataset,
    OptimOptions,
    cumulative_regret,
    expert_policy,
    generate_offline,
    make_riverswim,
    run_irlsvi,
    solve_avg_reward,
)

RUNS, HORIZON = 10, 2000


def main():
    env = make_riverswim(6)
    plan = solve_avg_reward(env)
    pi = expert_policy(plan.qvalues, Competence(20.0))
    opts = OptimOptions(outer_iters=3, inner_iters=50)
    print(f"optimal gain {plan.gain:.4f}, optimal policy {plan.policy.tolist()}")
    for n in (0, 300):
        final = []
        for seed in range(RUNS):
            rng = np.random.default_rng(seed)
            data = generate_offline(env, pi, n, 0, rng) if n else OfflineDataset.empty(0)
            tr = run_irlsvi(env, data, EpisodeSchedule("constant", block=100), HORIZON, LossHyper(), opts, rng, true_gain=plan.gain)
            final.append(cumulative_regret(tr)[-1])
        final = np.array(final)
        print(f"N={n:3d}  regret after {HORIZON} steps: {final.mean():7.1f} +- {final.std(ddof=1) / np.sqrt(RUNS):.1f}")


if __name__ == "__main__":
    main()
