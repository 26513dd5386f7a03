import numpy as np
import pytest

from informed_rl.mdp import Mdp

ACCEPTANCE_LINES: list = []


def two_state_mdp(initial=(0.5, 0.5)) -> Mdp:
    """Action 0 "go" switches state, action 1 "stay" self-loops; only (1, stay) pays 1."""
    P = np.zeros((2, 2, 2))
    P[0, 0, 1] = P[0, 1, 0] = 1.0
    P[1, 0, 0] = P[1, 1, 1] = 1.0
    r = np.array([[0.0, 0.0], [0.0, 1.0]])
    return Mdp(P, r, np.array(initial))


def random_mdp(rng, S, A, sparse=False) -> Mdp:
    P = rng.dirichlet(np.ones(S), size=(S, A))
    if sparse:
        P = np.where(rng.random(P.shape) < 0.4, 0.0, P)
        P[..., 0] += 1e-3  # keep every row nonempty
        P /= P.sum(axis=2, keepdims=True)
    return Mdp(P, rng.random((S, A)), np.full(S, 1.0 / S))


@pytest.fixture
def two_state():
    return two_state_mdp()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def posterior_case(seed):
    """Random (family, dataset, beta, online segment) with |family| <= 20 and N <= 200."""
    from informed_rl.envs import make_random_family
    from informed_rl.harness import ExpertConfig, expert_dataset
    from informed_rl.ipsrl import run_ipsrl, EpisodeSchedule

    rng = np.random.default_rng(seed)
    S, A, K = int(rng.integers(2, 5)), int(rng.integers(2, 4)), int(rng.integers(1, 21))
    fam = make_random_family(S, A, K, min_prob=0.01, seed=int(rng.integers(1 << 30)))
    beta = float(rng.uniform(0, 20))
    member = int(rng.integers(K))
    N = int(rng.integers(0, 201))
    data = expert_dataset(fam, member, ExpertConfig(beta), N, rng)
    trace = run_ipsrl(fam, member, data, beta, EpisodeSchedule("constant", block=5), int(rng.integers(1, 30)), rng)
    return fam, data, beta, trace.transitions


def two_policy_family():
    """Two RiverSwim perturbations with different optimal policies, uniform prior."""
    from informed_rl.envs import family_around, make_riverswim

    base = make_riverswim(4, right_success=0.3)
    for seed in range(200):
        fam = family_around(base, 2, 0.9, seed=seed)
        if not np.array_equal(fam.policies[0], fam.policies[1]):
            return fam
    raise RuntimeError("no seed produced distinct policies")
