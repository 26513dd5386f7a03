"""Finite average-reward MDPs: representation, planning and policy evaluation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

ROW_TOL = 1e-12


class ValidationError(ValueError):
    """Raised when an MDP or policy violates its structural invariants."""


class ConvergenceError(RuntimeError):
    """Relative value iteration did not reach the requested residual."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class EvaluationError(RuntimeError):
    """The induced Markov chain could not be evaluated."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Mdp:
    """Tabular MDP with ``transitions[s, a, s']`` and ``rewards[s, a]`` in [0, 1]."""

    transitions: np.ndarray
    rewards: np.ndarray
    initial_dist: np.ndarray

    def __post_init__(self):
        P = _freeze(self.transitions)
        r = _freeze(self.rewards)
        nu = _freeze(self.initial_dist)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValidationError(f"transitions must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if S < 1 or A < 1:
            raise ValidationError("need at least one state and one action")
        if r.shape != (S, A):
            raise ValidationError(f"rewards must have shape {(S, A)}, got {r.shape}")
        if nu.shape != (S,):
            raise ValidationError(f"initial_dist must have shape {(S,)}, got {nu.shape}")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ValidationError("transition rows must be finite and nonnegative")
        bad = np.abs(P.sum(axis=2) - 1.0) > ROW_TOL
        if bad.any():
            s, a = np.argwhere(bad)[0]
            raise ValidationError(f"transition row ({s}, {a}) does not sum to 1")
        if not np.all(np.isfinite(r)) or r.min() < 0 or r.max() > 1:
            raise ValidationError("rewards must lie in [0, 1]")
        if np.any(nu < 0) or abs(nu.sum() - 1.0) > ROW_TOL:
            raise ValidationError("initial_dist must be a probability vector")
        object.__setattr__(self, "transitions", P)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "initial_dist", nu)

    @property
    def num_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transitions.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Mdp):
            return NotImplemented
        return (
            np.array_equal(self.transitions, other.transitions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.initial_dist, other.initial_dist)
        )

    __hash__ = None

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "initial_dist": self.initial_dist.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Mdp":
        S, A = int(doc["num_states"]), int(doc["num_actions"])
        P = np.asarray(doc["transitions"], dtype=float).reshape(S, A, S)
        r = np.asarray(doc["rewards"], dtype=float).reshape(S, A)
        # JSON round-off can leave rows a few ulps off; renormalize within tolerance
        P = P / P.sum(axis=2, keepdims=True)
        nu = np.asarray(doc["initial_dist"], dtype=float)
        return cls(P, r, nu / nu.sum())

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Mdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class PlanSolution:
    """Output of :func:`solve_avg_reward`.

    ``bias`` is shifted so that its minimum is exactly zero.
    """

    gain: float
    bias: np.ndarray
    qvalues: np.ndarray
    policy: np.ndarray
    residual: float
    iterations: int = 0


@dataclass(frozen=True, eq=False)
class DeterministicPolicy:
    actions: np.ndarray

    def __post_init__(self):
        acts = np.array(self.actions, dtype=np.int64)
        if acts.ndim != 1:
            raise ValidationError("deterministic policy must be a vector of actions")
        acts.setflags(write=False)
        object.__setattr__(self, "actions", acts)

    def matrix(self, num_actions: int) -> np.ndarray:
        if self.actions.size and (self.actions.min() < 0 or self.actions.max() >= num_actions):
            raise ValidationError("policy action index out of range")
        probs = np.zeros((self.actions.size, num_actions))
        probs[np.arange(self.actions.size), self.actions] = 1.0
        return probs


@dataclass(frozen=True, eq=False)
class StochasticPolicy:
    probs: np.ndarray

    def __post_init__(self):
        probs = _freeze(self.probs)
        if probs.ndim != 2:
            raise ValidationError("stochastic policy must be a (S, A) matrix")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_TOL):
            raise ValidationError("policy rows must be probability vectors")
        object.__setattr__(self, "probs", probs)

    def matrix(self, num_actions: int) -> np.ndarray:
        if self.probs.shape[1] != num_actions:
            raise ValidationError("policy has the wrong number of actions")
        return self.probs


Policy = Union[DeterministicPolicy, StochasticPolicy, np.ndarray]


def greedy(qvalues: np.ndarray, tie_tol: float = 0.0) -> np.ndarray:
    """Greedy actions per state; near-ties resolve to the lowest action index."""
    q = np.asarray(qvalues, dtype=float)
    best = q.max(axis=1, keepdims=True)
    return np.argmax(q >= best - tie_tol, axis=1)


def solve_avg_reward(
    mdp: Mdp,
    tol: float = 1e-10,
    max_iters: int = 100_000,
    tie_tol: float = 1e-9,
) -> PlanSolution:
    """Relative value iteration on the aperiodicity-transformed MDP.

    Iterates on ``P' = (P + I)/2, r' = r/2`` which has the same bias and half
    the gain, so it converges on periodic chains too. The stopping test is the
    sup-norm Bellman residual of the *original* equation,
    ``max_s |max_a(r + P v) - v - gain|``, with gain taken as the midpoint of
    the Bellman differences.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    P, r = mdp.transitions, mdp.rewards
    S = mdp.num_states
    h = np.zeros(S)
    residual = np.inf
    for it in range(1, max_iters + 1):
        Th = (r + P @ h).max(axis=1)
        diff = Th - h
        hi, lo = diff.max(), diff.min()
        residual = 0.5 * (hi - lo)
        if residual <= tol:
            gain = 0.5 * (hi + lo)
            break
        # damped step: h <- (T h + h) / 2, re-anchored at reference state 0
        h = 0.5 * (Th + h)
        h = h - h[0]
    else:
        raise ConvergenceError(
            f"relative value iteration did not converge in {max_iters} iterations "
            f"(residual {residual:.3e})",
            residual=float(residual),
            iterations=max_iters,
        )
    bias = h - h.min()
    q = r + P @ bias
    bias.setflags(write=False)
    q.setflags(write=False)
    policy = greedy(q, tie_tol)
    policy.setflags(write=False)
    # shifting h by a constant leaves the Bellman differences unchanged
    return PlanSolution(float(gain), bias, q, policy, float(residual), it)


def bellman_residual(mdp: Mdp, gain: float, bias: np.ndarray) -> float:
    Tv = (mdp.rewards + mdp.transitions @ bias).max(axis=1)
    return float(np.abs(Tv - bias - gain).max())


def induced_chain(mdp: Mdp, policy: Policy) -> tuple[np.ndarray, np.ndarray]:
    """Transition matrix and expected one-step reward under ``policy``."""
    if isinstance(policy, (DeterministicPolicy, StochasticPolicy)):
        pi = policy.matrix(mdp.num_actions)
    else:
        arr = np.asarray(policy)
        if arr.ndim == 1:
            pi = DeterministicPolicy(arr).matrix(mdp.num_actions)
        else:
            pi = StochasticPolicy(arr).matrix(mdp.num_actions)
    if pi.shape[0] != mdp.num_states:
        raise ValidationError("policy has the wrong number of states")
    P_pi = np.einsum("sa,sat->st", pi, mdp.transitions)
    r_pi = (pi * mdp.rewards).sum(axis=1)
    return P_pi, r_pi


def _stationary(P: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    M = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    mu, *_ = np.linalg.lstsq(M, b, rcond=None)
    if np.abs(M @ mu - b).max() > 1e-9:
        raise EvaluationError("stationary distribution system is inconsistent")
    return mu


def policy_gain(mdp: Mdp, policy: Policy) -> float:
    """Long-run average reward of ``policy`` started from ``mdp.initial_dist``.

    Exact: each closed communicating class of the induced chain gets its
    stationary distribution from a linear solve, and transient states are
    weighted by their absorption probabilities into those classes.
    """
    P, r = induced_chain(mdp, policy)
    S = P.shape[0]
    n_comp, labels = connected_components(csr_matrix(P > 0), directed=True, connection="strong")
    class_gain = np.full(n_comp, np.nan)
    for c in range(n_comp):
        members = np.flatnonzero(labels == c)
        outside = np.setdiff1d(np.arange(S), members)
        if P[np.ix_(members, outside)].sum() > 0:
            continue  # not closed, hence transient
        mu = _stationary(P[np.ix_(members, members)])
        class_gain[c] = mu @ r[members]
    recurrent = ~np.isnan(class_gain[labels])
    g = np.zeros(S)
    g[recurrent] = class_gain[labels[recurrent]]
    transient = np.flatnonzero(~recurrent)
    if transient.size:
        Q = P[np.ix_(transient, transient)]
        rhs = P[np.ix_(transient, np.flatnonzero(recurrent))] @ g[recurrent]
        try:
            g[transient] = np.linalg.solve(np.eye(transient.size) - Q, rhs)
        except np.linalg.LinAlgError as exc:
            raise EvaluationError("absorption system is singular") from exc
    return float(mdp.initial_dist @ g)


def is_communicating(mdp: Mdp) -> bool:
    """Strong connectivity of the graph with an edge s->s' whenever some action can move there."""
    adj = (mdp.transitions > 0).any(axis=1)
    n_comp, _ = connected_components(csr_matrix(adj), directed=True, connection="strong")
    return n_comp == 1


def bias_span(solution: PlanSolution) -> float:
    return float(solution.bias.max() - solution.bias.min())


def action_gap(solution: PlanSolution) -> float:
    """Smallest margin between the best and second-best q-value over states."""
    q = np.asarray(solution.qvalues)
    if q.shape[1] < 2:
        raise ValueError("action gap is undefined for single-action MDPs")
    top2 = np.sort(q, axis=1)[:, -2:]
    return float((top2[:, 1] - top2[:, 0]).min())


def enumerate_policies(num_states: int, num_actions: int):
    """All deterministic stationary policies, as action vectors."""
    grids = np.indices((num_actions,) * num_states).reshape(num_states, -1).T
    return [np.array(p) for p in grids]
