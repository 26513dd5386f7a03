"""Informed randomized least-squares value iteration (inf-iRLSVI) on a tabular q-table.

The parameter is the q-table itself plus the expert's inverse temperature
``beta``. Each episode draws a randomized loss (Gaussian TD noise, exponential
imitation weights, Gaussian prior anchor), minimizes it by fixed-target
projected gradient descent, and acts greedily on the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .expert import OfflineDataset, entropy_beta_estimate
from .ipsrl import EpisodeRecord, EpisodeSchedule, RunTrace, Simulator, initial_state, schedule_lengths
from .mdp import Mdp, greedy, solve_avg_reward


class OptimizationError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True, eq=False)
class QParams:
    qtable: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        q = np.array(self.qtable, dtype=float)
        if not np.all(np.isfinite(q)):
            raise ValueError("q-table entries must be finite")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        object.__setattr__(self, "qtable", q)
        object.__setattr__(self, "beta", float(self.beta))

    def flat(self) -> np.ndarray:
        return np.append(self.qtable.ravel(), self.beta)

    @classmethod
    def from_flat(cls, x: np.ndarray, shape) -> "QParams":
        return cls(np.asarray(x[:-1]).reshape(shape), float(x[-1]))

    def greedy_policy(self) -> np.ndarray:
        return greedy(self.qtable)


def harmonic_eta(k: int) -> float:
    return 1.0 / (k + 1)


@dataclass(frozen=True)
class LossHyper:
    """Loss hyperparameters.

    ``prior_precision`` is the diagonal of the prior precision over q-entries
    (scalar or (S, A) array). ``beta_est`` picks how beta is treated:
    ``"map"`` optimizes it jointly, ``"entropy"`` fixes it at the
    entropy-based estimate. ``rtilde_offline=False`` restarts the average
    reward recursion at the first online transition.
    """

    sigma: float = 1.0
    lambda2: float = 1.0
    prior_precision: float | np.ndarray = 1.0
    eta: Callable[[int], float] = harmonic_eta
    use_imitation: bool = True
    use_prior: bool = True
    beta_est: str = "map"
    rtilde_offline: bool = True
    c0: float = 1.0
    beta_cap: float = 50.0

    def __post_init__(self):
        if self.sigma <= 0 or self.lambda2 <= 0:
            raise ValueError("sigma and lambda2 must be positive")
        if np.any(np.asarray(self.prior_precision) < 0):
            raise ValueError("prior precision must be nonnegative")
        if self.beta_est not in ("map", "entropy"):
            raise ValueError("beta_est must be 'map' or 'entropy'")


@dataclass(frozen=True)
class OptimOptions:
    outer_iters: int = 10
    inner_iters: int = 200
    learning_rate: float = 0.1
    beta_floor: float = 0.0
    grad_tol: float = 1e-10
    max_halvings: int = 60


def running_avg(rewards: Sequence[float], eta: Callable[[int], float] = harmonic_eta) -> np.ndarray:
    """``r~_0 = r_0``, ``r~_{k+1} = (1 - eta_k) r~_k + eta_k r_k``; returns ``r~_0..r~_n``."""
    r = np.asarray(rewards, dtype=float)
    if r.size == 0:
        raise ValueError("need at least one reward")
    out = np.empty(r.size + 1)
    out[0] = r[0]
    for k in range(r.size):
        e = eta(k)
        out[k + 1] = out[k] + e * (r[k] - out[k])
    return out


def td_error(params: QParams, datum) -> float:
    """``r + max_a' q(s', a') - q(s, a) - r~`` for ``datum = (s, a, s', r, r~)``."""
    s, a, s_next, r, r_tilde = datum
    q = params.qtable
    return float(r + q[int(s_next)].max() - q[int(s), int(a)] - r_tilde)


def imitation_loss(qtable: np.ndarray, beta: float, states, actions, weights=None) -> float:
    """``-sum_k w_k log pi_beta(a_k | s_k; q)`` under the Boltzmann expert model."""
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    if states.size == 0:
        return 0.0
    w = np.ones(states.size) if weights is None else np.asarray(weights, dtype=float)
    bq = beta * np.asarray(qtable, dtype=float)
    log_pi = bq - logsumexp(bq, axis=1, keepdims=True)
    return float(-(w * log_pi[states, actions]).sum())


@dataclass(frozen=True, eq=False)
class LossRealization:
    """One draw of the randomized loss over the combined offline+online data.

    Index ``k < num_offline`` is offline. Sufficient statistics over
    ``(s, a, s')`` triples make evaluation independent of the data size.
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    rtilde: np.ndarray
    td_noise: np.ndarray
    imitation_weights: np.ndarray
    prior_anchor: np.ndarray
    num_offline: int
    shape: tuple
    hyper: LossHyper
    fixed_beta: float | None = None

    def __post_init__(self):
        S, A = self.shape
        n = self.states.size
        if not (self.td_noise.size == n and self.imitation_weights.size == self.num_offline):
            raise ValueError("noise sequences do not match the data")
        c = self.rewards + self.td_noise - self.rtilde[:n]
        count = np.zeros((S, A, S))
        csum = np.zeros((S, A, S))
        np.add.at(count, (self.states, self.actions, self.next_states), 1.0)
        np.add.at(csum, (self.states, self.actions, self.next_states), c)
        W = np.zeros((S, A))
        off = slice(0, self.num_offline)
        np.add.at(W, (self.states[off], self.actions[off]), self.imitation_weights)
        prec = np.broadcast_to(np.asarray(self.hyper.prior_precision, dtype=float), (S, A)).copy()
        if not self.hyper.use_prior:
            prec[:] = 0.0
        object.__setattr__(self, "_count", count)
        object.__setattr__(self, "_csum", csum)
        object.__setattr__(self, "_c2", float(c @ c))
        W = W if self.hyper.use_imitation else np.zeros((S, A))
        object.__setattr__(self, "_W", W)
        object.__setattr__(self, "_w_s", W.sum(axis=1))
        object.__setattr__(self, "_has_imitation", bool(W.any()))
        object.__setattr__(self, "_prec", prec)

    @property
    def num_total(self) -> int:
        return self.states.size

    def value_and_grad(self, params: QParams, frozen: np.ndarray):
        return loss_value_and_grad(self, params, frozen)


def build_loss(
    dataset: OfflineDataset,
    online: Sequence,
    reward_table: np.ndarray,
    hyper: LossHyper = LossHyper(),
    rng=None,
) -> LossRealization:
    """Assemble combined data (offline first) and draw the loss perturbations.

    ``online`` holds ``(s, a, s')`` rows; rewards for every datum come from
    ``reward_table``.
    """
    rng = np.random.default_rng(rng)
    reward_table = np.asarray(reward_table, dtype=float)
    S, A = reward_table.shape
    s_off, a_off, n_off = dataset.transitions
    on = np.asarray(online, dtype=np.int64).reshape(-1, 3)
    states = np.concatenate([s_off, on[:, 0]])
    actions = np.concatenate([a_off, on[:, 1]])
    next_states = np.concatenate([n_off, on[:, 2]])
    rewards = reward_table[states, actions]
    N = s_off.size
    if rewards.size == 0:
        rtilde = np.zeros(1)
    elif hyper.rtilde_offline or N == 0 or on.shape[0] == 0:
        rtilde = running_avg(rewards, hyper.eta)
    else:
        rt_off = running_avg(rewards[:N], hyper.eta)[:N]
        rtilde = np.concatenate([rt_off, running_avg(rewards[N:], hyper.eta)])

    z = rng.normal(0.0, hyper.sigma, size=states.size)
    w = rng.exponential(1.0, size=N)
    prec = np.broadcast_to(np.asarray(hyper.prior_precision, dtype=float), (S, A))
    with np.errstate(divide="ignore"):
        sd = np.where(prec > 0, 1.0 / np.sqrt(prec), 0.0)
    anchor = rng.normal(size=(S, A)) * sd
    fixed_beta = None
    if hyper.beta_est == "entropy":
        fixed_beta = entropy_beta_estimate(dataset, hyper.c0, hyper.beta_cap, S, A) if N else 0.0
    return LossRealization(
        states, actions, next_states, rewards, rtilde, z, w, anchor, N, (S, A), hyper, fixed_beta
    )


def zero_noise(real: LossRealization) -> LossRealization:
    """The same data with all perturbations switched off (``z = 0, w = 1, anchor = 0``)."""
    return replace(
        real,
        td_noise=np.zeros_like(real.td_noise),
        imitation_weights=np.ones_like(real.imitation_weights),
        prior_anchor=np.zeros_like(real.prior_anchor),
    )


@dataclass(frozen=True, eq=False)
class Gradient:
    qtable: np.ndarray
    beta: float

    def flat(self) -> np.ndarray:
        return np.append(self.qtable.ravel(), self.beta)


def _frozen_terms(real: LossRealization, frozen: np.ndarray):
    """Quantities of the TD term that depend only on the frozen snapshot.

    With ``x_k = c_k + F(s'_k)`` the TD sum is ``sum x_k^2 - 2 sum q x_sum + sum n_sa q^2``.
    """
    count, csum = real._count, real._csum
    F = np.asarray(frozen, dtype=float).max(axis=1)  # frozen max_a' q(s', a')
    n_sa = count.sum(axis=2)
    x_sum = csum.sum(axis=2) + count @ F
    x2 = real._c2 + 2.0 * float((csum * F).sum()) + float((count * F * F).sum())
    return n_sa, x_sum, x2


def _evaluate(real: LossRealization, q: np.ndarray, beta: float, terms) -> tuple[float, np.ndarray, float]:
    n_sa, x_sum, x2 = terms
    inv = 1.0 / (2.0 * real.hyper.sigma**2)
    value = inv * (x2 - 2.0 * float((q * x_sum).sum()) + float((n_sa * q * q).sum()))
    grad_q = -2.0 * inv * (x_sum - n_sa * q)

    W = real._W
    grad_beta = 0.0
    if real._has_imitation:
        bq = beta * q
        m = bq.max(axis=1, keepdims=True)
        e = np.exp(bq - m)
        z = e.sum(axis=1, keepdims=True)
        lse = (m + np.log(z))[:, 0]
        pi = e / z
        w_s = real._w_s
        value -= float((W * bq).sum() - w_s @ lse)
        grad_q += -beta * (W - w_s[:, None] * pi)
        grad_beta = -float((W * q).sum() - w_s @ (pi * q).sum(axis=1))

    diff = q - real.prior_anchor
    value += 0.5 * float((real._prec * diff * diff).sum())
    grad_q += real._prec * diff
    if real.fixed_beta is None:
        value += real.hyper.lambda2 * beta
        grad_beta += real.hyper.lambda2
    else:
        grad_beta = 0.0
    return float(value), grad_q, float(grad_beta)


def loss_value_and_grad(real: LossRealization, params: QParams, frozen: np.ndarray) -> tuple[float, Gradient]:
    """Smoothed randomized loss with TD targets read from the ``frozen`` q-table.

    Returns the value and its exact gradient with respect to every q-entry and beta.
    """
    if params.beta < 0:
        raise ValueError("beta must be nonnegative")
    value, gq, gb = _evaluate(real, params.qtable, params.beta, _frozen_terms(real, frozen))
    return value, Gradient(gq, gb)


def minimize_loss(
    real: LossRealization,
    init: QParams,
    opts: OptimOptions = OptimOptions(),
    history: list | None = None,
) -> QParams:
    """Fixed-target projected gradient descent with backtracking.

    Each outer iteration freezes the TD targets at the current q-table and
    takes up to ``inner_iters`` steps; a step that would raise the loss is
    retried with half the learning rate. ``history`` (if given) receives one
    list of accepted loss values per outer iteration.
    """
    if opts.outer_iters < 1 or opts.inner_iters < 1 or opts.learning_rate <= 0:
        raise ValueError("optimizer options must be positive")
    q = init.qtable.copy()
    beta = init.beta if real.fixed_beta is None else real.fixed_beta
    beta = max(beta, opts.beta_floor)
    fixed = real.fixed_beta is not None
    step_count = 0
    for outer in range(opts.outer_iters):
        terms = _frozen_terms(real, q)
        lr = opts.learning_rate
        value, gq, gb = _evaluate(real, q, beta, terms)
        losses = [value]
        for _ in range(opts.inner_iters):
            step_count += 1
            if not np.isfinite(value):
                raise OptimizationError("loss is not finite", step_count)
            if math.sqrt(float((gq * gq).sum()) + gb * gb) < opts.grad_tol:
                break
            for _ in range(opts.max_halvings):
                q_new = q - lr * gq
                b_new = beta if fixed else max(beta - lr * gb, opts.beta_floor)
                v_new, gq_new, gb_new = _evaluate(real, q_new, b_new, terms)
                if v_new <= value:  # False for NaN
                    break
                lr *= 0.5
            else:
                break  # no descent possible at machine precision
            q, beta, value, gq, gb = q_new, b_new, v_new, gq_new, gb_new
            losses.append(value)
        if history is not None:
            history.append(losses)
        if not np.all(np.isfinite(q)):
            raise OptimizationError("parameters diverged", step_count)
    return QParams(q, beta)


def fixed_target_solution(real: LossRealization) -> np.ndarray:
    """Fixed point of the frozen-target iteration when beta and imitation play no role.

    Solves the linear normal equations ``(Prec + D/sigma^2) q - B F(q)/sigma^2 = Prec*anchor + C/sigma^2``
    for single-action problems (where ``max`` is the identity).
    """
    S, A = real.shape
    if A != 1:
        raise ValueError("closed form only exists for single-action problems")
    s2 = real.hyper.sigma**2
    count = real._count[:, 0, :]
    D = np.diag(count.sum(axis=1))
    M = np.diag(real._prec[:, 0]) + (D - count) / s2
    rhs = real._prec[:, 0] * real.prior_anchor[:, 0] + real._csum[:, 0, :].sum(axis=1) / s2
    return np.linalg.solve(M, rhs).reshape(S, 1)


def run_irlsvi(
    env: Mdp,
    dataset: OfflineDataset | None,
    schedule: EpisodeSchedule,
    horizon: int,
    hyper: LossHyper = LossHyper(),
    opts: OptimOptions = OptimOptions(),
    rng=None,
    init: QParams | None = None,
    true_gain: float | None = None,
) -> RunTrace:
    """One online run of inf-iRLSVI on ``env`` (rewards known to the agent).

    Random draws, in order: the initial state, then per episode the loss
    perturbations followed by one uniform per step for transitions.
    """
    rng = np.random.default_rng(rng)
    S, A = env.num_states, env.num_actions
    if dataset is None:
        dataset = OfflineDataset.empty()
    plan = solve_avg_reward(env)
    if true_gain is None:
        true_gain = plan.gain
    params = init or QParams(np.zeros((S, A)), 1.0)
    sim = Simulator(env)
    states = np.empty(horizon + 1, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    rewards = np.empty(horizon)
    s = initial_state(env, rng)
    states[0] = s
    episodes = []
    betas = []
    t = 0
    for T_k in schedule_lengths(schedule, horizon):
        online = np.stack([states[:t], actions[:t], states[1 : t + 1]], axis=1)
        real = build_loss(dataset, online, env.rewards, hyper, rng)
        params = minimize_loss(real, params, opts)
        policy = params.greedy_policy()
        betas.append(params.beta)
        u = rng.random(T_k).tolist()
        s = sim.rollout(policy.tolist(), s, u, states, actions, rewards, t)
        mismatch = not np.array_equal(policy, plan.policy)
        episodes.append(EpisodeRecord(t, T_k, -1, mismatch, float("nan")))
        t += T_k
    trace = RunTrace(states, actions, rewards, episodes, int(dataset.meta.get("true_member_index", -1)), true_gain)
    trace.info["betas"] = betas
    trace.info["final_qtable"] = params.qtable.tolist()
    return trace
