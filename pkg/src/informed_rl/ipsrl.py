"""Informed posterior sampling (inf-iPSRL) with fixed episode schedules."""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import ParameterFamily
from .expert import OfflineDataset
from .mdp import Mdp
from .posterior import (
    PosteriorState,
    informed_prior,
    mismatch_probability,
    online_update,
    sample_member,
)

SCHEDULE_KINDS = ("linear", "eps_linear", "constant", "explicit")


@dataclass(frozen=True)
class EpisodeSchedule:
    """Deterministic episode lengths.

    ``linear``: T_k = k. ``eps_linear``: T_k = ceil(eps_hat * k).
    ``constant``: T_k = block. ``explicit``: the given lengths, the last one
    repeated once the list runs out.
    """

    kind: str = "linear"
    eps_hat: float | None = None
    block: int | None = None
    lengths: tuple = ()

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "eps_linear" and not (self.eps_hat is not None and self.eps_hat > 0):
            raise ValueError("eps_linear schedule needs a positive eps_hat")
        if self.kind == "constant" and not (self.block is not None and self.block >= 1):
            raise ValueError("constant schedule needs a block length >= 1")
        if self.kind == "explicit":
            if not self.lengths or min(self.lengths) < 1:
                raise ValueError("explicit schedule needs positive lengths")
            object.__setattr__(self, "lengths", tuple(int(x) for x in self.lengths))

    @classmethod
    def parse(cls, text: str) -> "EpisodeSchedule":
        """Parse ``linear``, ``eps:<x>``, ``const:<n>`` or ``explicit:<n1,n2,...>``."""
        kind, _, arg = text.partition(":")
        if kind == "linear":
            return cls("linear")
        if kind in ("eps", "eps_linear"):
            return cls("eps_linear", eps_hat=float(arg))
        if kind in ("const", "constant"):
            return cls("constant", block=int(arg))
        if kind == "explicit":
            return cls("explicit", lengths=tuple(int(x) for x in arg.split(",")))
        raise ValueError(f"cannot parse schedule {text!r}")

    def __str__(self) -> str:
        if self.kind == "linear":
            return "linear"
        if self.kind == "eps_linear":
            return f"eps:{self.eps_hat!r}"
        if self.kind == "constant":
            return f"const:{self.block}"
        return "explicit:" + ",".join(map(str, self.lengths))

    def length(self, k: int) -> int:
        """Untruncated length of episode ``k`` (1-based)."""
        if self.kind == "linear":
            return k
        if self.kind == "eps_linear":
            return max(1, math.ceil(self.eps_hat * k))
        if self.kind == "constant":
            return self.block
        return self.lengths[min(k, len(self.lengths)) - 1]


def schedule_lengths(schedule: EpisodeSchedule, horizon: int) -> list[int]:
    """Episode lengths covering exactly ``horizon`` steps (last one truncated)."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    out, total, k = [], 0, 1
    while total < horizon:
        T_k = min(schedule.length(k), horizon - total)
        out.append(T_k)
        total += T_k
        k += 1
    return out


def episodes_started(schedule: EpisodeSchedule, horizon: int) -> int:
    """Number of episodes that start before ``horizon``."""
    return len(schedule_lengths(schedule, horizon))


@dataclass(frozen=True)
class EpisodeRecord:
    start: int
    length: int
    sampled_member: int
    mismatch: bool
    mismatch_prob: float


@dataclass(eq=False)
class RunTrace:
    """States ``s_0..s_T``, actions and rewards of one online run plus per-episode records."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    episodes: list
    true_member: int
    true_gain: float
    final_posterior: PosteriorState | None = None
    episode_log_weights: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return self.actions.size

    @property
    def transitions(self) -> np.ndarray:
        return np.stack([self.states[:-1], self.actions, self.states[1:]], axis=1)

    @property
    def mismatch_flags(self) -> np.ndarray:
        return np.array([e.mismatch for e in self.episodes], dtype=bool)

    def summary(self) -> dict:
        regret = self.true_gain * self.horizon - float(self.rewards.sum())
        return {
            "true_member": self.true_member,
            "true_gain": self.true_gain,
            "horizon": self.horizon,
            "num_episodes": len(self.episodes),
            "total_reward": float(self.rewards.sum()),
            "regret": regret,
            "episodes": [
                {
                    "start": e.start,
                    "length": e.length,
                    "sampled_member": e.sampled_member,
                    "mismatch": bool(e.mismatch),
                    "mismatch_prob": e.mismatch_prob,
                }
                for e in self.episodes
            ],
            **self.info,
        }


class Simulator:
    """Samples next states of a fixed MDP by inverse CDF on pre-drawn uniforms."""

    def __init__(self, mdp: Mdp):
        self.cdf = np.cumsum(mdp.transitions, axis=2).tolist()
        self.rewards = mdp.rewards.tolist()
        self.last = mdp.num_states - 1

    def rollout(self, policy: Sequence[int], s: int, uniforms: Sequence[float], states, actions, rewards, t0: int) -> int:
        cdf, rew, last = self.cdf, self.rewards, self.last
        t = t0
        for u in uniforms:
            a = policy[s]
            actions[t] = a
            rewards[t] = rew[s][a]
            s = min(bisect_right(cdf[s][a], u), last)
            t += 1
            states[t] = s
        return s


def initial_state(mdp: Mdp, rng) -> int:
    cdf = np.cumsum(mdp.initial_dist)
    return min(int(np.searchsorted(cdf, rng.random(), side="right")), mdp.num_states - 1)


def run_ipsrl(
    family: ParameterFamily,
    true_member: int,
    dataset: OfflineDataset | None,
    beta: float,
    schedule: EpisodeSchedule,
    horizon: int,
    rng=None,
    record_posteriors: bool = False,
) -> RunTrace:
    """One online run of informed posterior sampling against ``family.members[true_member]``.

    Random draws, in order: the initial state, then per episode one uniform
    for the member sample followed by one uniform per step for transitions.
    An empty dataset gives the uninformed baseline.
    """
    rng = np.random.default_rng(rng)
    env = family.members[true_member]
    if dataset is None:
        dataset = OfflineDataset.empty()
    post = informed_prior(family, dataset, beta)
    sim = Simulator(env)
    true_policy = family.policies[true_member]
    policies = family.policies.tolist()

    states = np.empty(horizon + 1, dtype=np.int64)
    actions = np.empty(horizon, dtype=np.int64)
    rewards = np.empty(horizon)
    s = initial_state(env, rng)
    states[0] = s
    episodes, log_weights = [], []
    t = 0
    for T_k in schedule_lengths(schedule, horizon):
        if record_posteriors:
            log_weights.append(post.log_weights)
        eps_k = mismatch_probability(post, family)
        m = sample_member(post, rng)
        u = rng.random(T_k).tolist()
        s = sim.rollout(policies[m], s, u, states, actions, rewards, t)
        mismatch = not np.array_equal(family.policies[m], true_policy)
        episodes.append(EpisodeRecord(t, T_k, m, mismatch, eps_k))
        seg = np.stack([states[t : t + T_k], actions[t : t + T_k], states[t + 1 : t + T_k + 1]], axis=1)
        post = online_update(post, family, seg)
        t += T_k
    return RunTrace(
        states,
        actions,
        rewards,
        episodes,
        true_member,
        family.plans[true_member].gain,
        post,
        np.array(log_weights) if record_posteriors else None,
    )
