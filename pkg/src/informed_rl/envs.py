"""Finite parameter families of MDPs and benchmark environments."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .mdp import (
    Mdp,
    PlanSolution,
    ValidationError,
    action_gap,
    bias_span,
    is_communicating,
    solve_avg_reward,
)

LEFT, RIGHT = 0, 1


class GenerationError(RuntimeError):
    """A family with the requested structural properties could not be built."""


@dataclass(frozen=True, eq=False)
class ParameterFamily:
    """A finite set of candidate MDPs with prior weights and cached plans.

    Members share the state/action spaces, reward table and initial
    distribution; only transitions vary. ``plans`` is computed on construction.
    """

    members: tuple
    prior: np.ndarray = None
    metadata: dict = field(default_factory=dict)
    plans: tuple = field(init=False)

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValidationError("family needs at least one member")
        ref = members[0]
        for i, m in enumerate(members):
            if m.transitions.shape != ref.transitions.shape:
                raise ValidationError(f"member {i} has a different shape")
            if not (np.array_equal(m.rewards, ref.rewards) and np.array_equal(m.initial_dist, ref.initial_dist)):
                raise ValidationError(f"member {i} does not share rewards and initial distribution")
            if not is_communicating(m):
                raise ValidationError(f"member {i} is not communicating")
        K = len(members)
        prior = np.full(K, 1.0 / K) if self.prior is None else np.array(self.prior, dtype=float)
        if prior.shape != (K,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-12:
            raise ValidationError("prior must be a probability vector over members")
        prior.setflags(write=False)
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "prior", prior)
        object.__setattr__(self, "metadata", dict(self.metadata))
        object.__setattr__(self, "plans", tuple(solve_avg_reward(m) for m in members))

        with np.errstate(divide="ignore"):
            log_p = np.log(np.stack([m.transitions for m in members]))
        qs = np.stack([p.qvalues for p in self.plans])
        pols = np.stack([p.policy for p in self.plans])
        # members with the same MDPSolve output share a policy class
        _, classes = np.unique(pols, axis=0, return_inverse=True)
        for arr in (log_p, qs, pols, classes):
            arr.setflags(write=False)
        object.__setattr__(self, "_log_transitions", log_p)
        object.__setattr__(self, "_qtables", qs)
        object.__setattr__(self, "_policies", pols)
        object.__setattr__(self, "_policy_classes", classes.reshape(-1))

    def __len__(self) -> int:
        return len(self.members)

    @property
    def num_states(self) -> int:
        return self.members[0].num_states

    @property
    def num_actions(self) -> int:
        return self.members[0].num_actions

    @property
    def rewards(self) -> np.ndarray:
        return self.members[0].rewards

    @property
    def initial_dist(self) -> np.ndarray:
        return self.members[0].initial_dist

    @property
    def log_transitions(self) -> np.ndarray:
        """``log P`` stacked over members, shape (K, S, A, S); zeros map to -inf."""
        return self._log_transitions

    @property
    def qtables(self) -> np.ndarray:
        return self._qtables

    @property
    def policies(self) -> np.ndarray:
        return self._policies

    @property
    def policy_classes(self) -> np.ndarray:
        """Index of each member's optimal-policy equivalence class."""
        return self._policy_classes

    @property
    def gains(self) -> np.ndarray:
        return np.array([p.gain for p in self.plans])

    @property
    def span(self) -> float:
        return max(bias_span(p) for p in self.plans)

    @property
    def gap(self) -> float:
        if self.num_actions < 2:
            return float("inf")
        return min(action_gap(p) for p in self.plans)

    @property
    def family_id(self) -> str:
        h = hashlib.sha1()
        for m in self.members:
            h.update(m.transitions.tobytes())
        h.update(self.rewards.tobytes())
        return h.hexdigest()[:16]

    def permuted(self, order: Sequence[int]) -> "ParameterFamily":
        order = list(order)
        return ParameterFamily(
            tuple(self.members[i] for i in order), self.prior[order], self.metadata
        )

    def to_dict(self) -> dict:
        return {
            "members": [m.to_dict() for m in self.members],
            "prior": self.prior.tolist(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParameterFamily":
        members = tuple(Mdp.from_dict(m) for m in doc["members"])
        prior = np.asarray(doc["prior"], dtype=float)
        return cls(members, prior / prior.sum(), doc.get("metadata", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "ParameterFamily":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _random_rows(rng, num_states, num_actions, min_prob):
    rows = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    rows = np.maximum(rows, min_prob)
    return rows / rows.sum(axis=2, keepdims=True)


def make_random_family(
    num_states: int,
    num_actions: int,
    family_size: int,
    min_prob: float = 0.01,
    seed=None,
    min_gap: float = 1e-6,
    max_retries: int = 1000,
) -> ParameterFamily:
    """Random family with flat-Dirichlet transition rows floored at ``min_prob``.

    The reward table is shared and uniform on [0, 1]. A member whose optimal
    q-table has a gap of at most ``min_gap`` at some state is redrawn.
    """
    if family_size < 1:
        raise ValueError("family_size must be at least 1")
    if min_prob < 0 or min_prob * num_states > 1:
        raise ValueError("need 0 <= min_prob * num_states <= 1")
    rng = np.random.default_rng(seed)
    rewards = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    nu = np.full(num_states, 1.0 / num_states)
    members = []
    retries = 0
    while len(members) < family_size:
        mdp = Mdp(_random_rows(rng, num_states, num_actions, min_prob), rewards, nu)
        if num_actions < 2 or action_gap(solve_avg_reward(mdp)) > min_gap:
            members.append(mdp)
            continue
        retries += 1
        if retries > max_retries:
            raise GenerationError(f"could not draw a member with action gap > {min_gap}")
    meta = {
        "kind": "random",
        "num_states": num_states,
        "num_actions": num_actions,
        "min_prob": min_prob,
        "seed": None if seed is None else int(seed),
    }
    return ParameterFamily(tuple(members), None, meta)


def make_riverswim(
    num_states: int = 6,
    right_success: float = 0.6,
    left_reward: float = 0.005,
    right_reward: float = 1.0,
) -> Mdp:
    """RiverSwim chain. Action 0 swims LEFT (deterministic), action 1 RIGHT.

    Swimming right moves up with probability ``right_success``; of the
    remaining mass one eighth falls back a state and the rest stays put.
    """
    if num_states < 2:
        raise ValueError("RiverSwim needs at least 2 states")
    if not 0.0 <= right_success <= 1.0:
        raise ValueError("right_success must be a probability")
    if left_reward < 0 or right_reward < 0:
        raise ValueError("rewards must be nonnegative")
    S = num_states
    fall = (1.0 - right_success) / 8.0
    P = np.zeros((S, 2, S))
    for s in range(S):
        P[s, LEFT, max(s - 1, 0)] = 1.0
        if s == 0:
            P[s, RIGHT, 1] = right_success
            P[s, RIGHT, 0] = 1.0 - right_success
        elif s == S - 1:
            P[s, RIGHT, s - 1] = fall
            P[s, RIGHT, s] = 1.0 - fall
        else:
            P[s, RIGHT, s + 1] = right_success
            P[s, RIGHT, s - 1] = fall
            P[s, RIGHT, s] = 1.0 - right_success - fall
    r = np.zeros((S, 2))
    r[0, LEFT] = left_reward
    r[S - 1, RIGHT] = right_reward
    scale = max(1.0, r.max())
    nu = np.zeros(S)
    nu[0] = 1.0
    return Mdp(P, r / scale, nu)


def family_around(
    base: Mdp,
    family_size: int,
    perturbation: float,
    seed=None,
    prior: Sequence[float] | None = None,
) -> ParameterFamily:
    """Family of random perturbations of ``base``; member 0 is ``base`` itself.

    Each other member mixes every transition row with a flat Dirichlet draw:
    ``(1 - perturbation) * row + perturbation * noise``.
    """
    if not 0.0 <= perturbation <= 1.0:
        raise ValueError("perturbation must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    S, A = base.num_states, base.num_actions
    members = [base]
    for i in range(1, family_size):
        noise = rng.dirichlet(np.ones(S), size=(S, A))
        P = (1.0 - perturbation) * base.transitions + perturbation * noise
        P = P / P.sum(axis=2, keepdims=True)
        mdp = Mdp(P, base.rewards, base.initial_dist)
        if not is_communicating(mdp):
            raise GenerationError(f"perturbed member {i} is not communicating")
        if A > 1 and action_gap(solve_avg_reward(mdp)) <= 0:
            raise GenerationError(f"perturbed member {i} has a zero action gap")
        members.append(mdp)
    meta = {
        "kind": "around",
        "perturbation": perturbation,
        "seed": None if seed is None else int(seed),
    }
    return ParameterFamily(tuple(members), prior, meta)


def golden_family() -> ParameterFamily:
    """The reference S=5, A=3, 20-member family used by the shipped experiment config."""
    return make_random_family(5, 3, 20, min_prob=0.02, seed=2022)
