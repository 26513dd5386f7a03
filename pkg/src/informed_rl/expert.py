"""Expert demonstrator model, offline dataset generation and offline-only estimators."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import softmax

from .mdp import DeterministicPolicy, Mdp, StochasticPolicy


class EstimationError(ValueError):
    pass


@dataclass(frozen=True)
class Competence:
    """Deliberateness ``beta`` (scalar or per-state) and knowledgeability ``lam``.

    ``lam = inf`` means the expert acts on the exact q-table.
    """

    beta: Union[float, np.ndarray] = 1.0
    lam: float = math.inf

    def __post_init__(self):
        if np.any(np.asarray(self.beta) < 0):
            raise ValueError("beta must be nonnegative")
        if not self.lam > 0:
            raise ValueError("lambda must be positive or infinite")


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Expert trajectory ``s_0, a_0, ..., a_{N-1}, s_N``."""

    states: np.ndarray
    actions: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        s = np.array(self.states, dtype=np.int64).reshape(-1)
        a = np.array(self.actions, dtype=np.int64).reshape(-1)
        if s.size != a.size + 1:
            raise ValueError("need exactly one more state than actions")
        s.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "states", s)
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "meta", dict(self.meta))

    def __len__(self) -> int:
        return self.actions.size

    @property
    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.states[:-1], self.actions, self.states[1:]

    @classmethod
    def empty(cls, start_state: int = 0, **meta) -> "OfflineDataset":
        return cls(np.array([start_state]), np.array([], dtype=np.int64), meta)

    def to_dict(self) -> dict:
        meta = dict(self.meta)
        if "lambda" in meta and meta["lambda"] == math.inf:
            meta["lambda"] = "inf"
        return {"states": self.states.tolist(), "actions": self.actions.tolist(), "meta": meta}

    @classmethod
    def from_dict(cls, doc: dict) -> "OfflineDataset":
        meta = dict(doc.get("meta", {}))
        if meta.get("lambda") == "inf":
            meta["lambda"] = math.inf
        return cls(np.asarray(doc["states"]), np.asarray(doc["actions"], dtype=np.int64), meta)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "OfflineDataset":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def expert_policy(q: np.ndarray, competence: Competence, rng=None) -> StochasticPolicy:
    """Boltzmann policy ``pi(a|s) ~ exp(beta(s) q(s, a))``.

    For finite ``lam`` a single perturbed table ``q + N(0, 1/lam^2)`` is drawn
    first, so the expert stays stationary.
    """
    q = np.asarray(q, dtype=float)
    if not np.all(np.isfinite(q)):
        raise ValueError("q must be finite")
    if math.isfinite(competence.lam):
        rng = np.random.default_rng(rng)
        q = q + rng.normal(0.0, 1.0 / competence.lam, size=q.shape)
    beta = np.broadcast_to(np.asarray(competence.beta, dtype=float), (q.shape[0],))
    probs = softmax(beta[:, None] * q, axis=1)
    return StochasticPolicy(probs / probs.sum(axis=1, keepdims=True))


def generate_offline(
    mdp: Mdp,
    policy: StochasticPolicy | DeterministicPolicy,
    horizon: int,
    start_state: int = 0,
    rng=None,
    **meta,
) -> OfflineDataset:
    """Roll the expert forward ``horizon`` steps from the fixed ``start_state``."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    rng = np.random.default_rng(rng)
    pi = policy.matrix(mdp.num_actions)
    pi_cdf = np.cumsum(pi, axis=1)
    p_cdf = np.cumsum(mdp.transitions, axis=2)
    u = rng.random((horizon, 2))
    states = np.empty(horizon + 1, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    s = int(start_state)
    states[0] = s
    A1, S1 = mdp.num_actions - 1, mdp.num_states - 1
    for t in range(horizon):
        a = min(int(np.searchsorted(pi_cdf[s], u[t, 0], side="right")), A1)
        s = min(int(np.searchsorted(p_cdf[s, a], u[t, 1], side="right")), S1)
        actions[t] = a
        states[t + 1] = s
    return OfflineDataset(states, actions, meta)


def visit_counts(dataset: OfflineDataset, num_states: int, num_actions: int) -> np.ndarray:
    counts = np.zeros((num_states, num_actions), dtype=np.int64)
    np.add.at(counts, (dataset.states[:-1], dataset.actions), 1)
    return counts


def majority_estimator(dataset: OfflineDataset, num_states: int, num_actions: int) -> DeterministicPolicy:
    """Most frequent expert action per state; ties and unvisited states go to the lowest index."""
    counts = visit_counts(dataset, num_states, num_actions)
    return DeterministicPolicy(np.argmax(counts, axis=1))


def conditional_entropy(counts: np.ndarray) -> float:
    """H(action | state) in nats under the empirical joint given by ``counts``."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        raise EstimationError("no visits to estimate entropy from")
    per_state = counts.sum(axis=1)
    visited = per_state > 0
    p = counts[visited] / per_state[visited, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    return float(-(per_state[visited] / total) @ plogp.sum(axis=1))


def entropy_beta_estimate(
    dataset: OfflineDataset,
    c0: float = 1.0,
    beta_cap: float = 50.0,
    num_states: int | None = None,
    num_actions: int | None = None,
) -> float:
    """``min(c0 / H, beta_cap)`` with H the empirical action entropy given the state."""
    if c0 <= 0 or beta_cap <= 0:
        raise ValueError("c0 and beta_cap must be positive")
    if len(dataset) == 0:
        raise EstimationError("cannot estimate beta from an empty dataset")
    S = num_states or int(dataset.states.max()) + 1
    A = num_actions or int(dataset.actions.max()) + 1
    H = conditional_entropy(visit_counts(dataset, S, A))
    if H <= 0:
        return float(beta_cap)
    return float(min(c0 / H, beta_cap))
