"""Exact Bayesian filtering over a finite parameter family, in log space."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .envs import ParameterFamily
from .expert import OfflineDataset


class InconsistentEvidenceError(RuntimeError):
    """Every family member assigns zero probability to the observed data."""


class ModelMismatchWarning(UserWarning):
    """The dataset was generated by a noisy (finite-lambda) expert."""


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Unnormalized log-weights ``log mu(theta)`` over family members."""

    log_weights: np.ndarray
    family_ref: str
    epoch: int = 0

    def __post_init__(self):
        lw = np.array(self.log_weights, dtype=float)
        if np.any(np.isnan(lw)) or np.any(lw == np.inf):
            raise ValueError("log-weights must not be NaN or +inf")
        if not np.isfinite(lw).any():
            raise InconsistentEvidenceError("all members have zero posterior weight")
        lw.setflags(write=False)
        object.__setattr__(self, "log_weights", lw)

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights
        w = np.exp(lw - lw.max())
        return w / w.sum()

    def to_dict(self) -> dict:
        return {"family_ref": self.family_ref, "epoch": self.epoch, "weights": self.weights.tolist()}


def prior_state(family: ParameterFamily) -> PosteriorState:
    with np.errstate(divide="ignore"):
        return PosteriorState(np.log(family.prior), family.family_id, 0)


def _check_family(post: PosteriorState, family: ParameterFamily):
    if post.family_ref != family.family_id:
        raise ValueError("posterior belongs to a different family")


def _checked(log_weights: np.ndarray, family: ParameterFamily, epoch: int) -> PosteriorState:
    if not np.isfinite(log_weights).any():
        raise InconsistentEvidenceError("observed data is impossible under every family member")
    return PosteriorState(log_weights, family.family_id, epoch)


def offline_log_likelihood(family: ParameterFamily, dataset: OfflineDataset, beta: float) -> np.ndarray:
    """Per-member log-probability of the expert trajectory (transition and Boltzmann action factors)."""
    s, a, s_next = dataset.transitions
    if s.size == 0:
        return np.zeros(len(family))
    trans = family.log_transitions[:, s, a, s_next].sum(axis=1)
    if beta == 0:
        # uniform expert: identical factor for every member
        return trans - s.size * math.log(family.num_actions)
    bq = beta * family.qtables  # (K, S, A)
    log_pi = bq - logsumexp(bq, axis=2, keepdims=True)
    return trans + log_pi[:, s, a].sum(axis=1)


def informed_prior(family: ParameterFamily, dataset: OfflineDataset, beta: float) -> PosteriorState:
    """Condition the family prior on an expert dataset generated with known ``beta``.

    Exact when the expert acted on the exact q-table; a dataset whose metadata
    records a finite lambda triggers :class:`ModelMismatchWarning`.
    """
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    lam = dataset.meta.get("lambda", math.inf)
    if lam is not None and float(lam) != math.inf:
        warnings.warn(
            "dataset comes from a finite-lambda expert; using the exact-q likelihood",
            ModelMismatchWarning,
            stacklevel=2,
        )
    with np.errstate(divide="ignore"):
        log_prior = np.log(family.prior)
    with np.errstate(invalid="ignore"):
        lw = log_prior + offline_log_likelihood(family, dataset, beta)
    lw = np.where(np.isnan(lw), -np.inf, lw)
    return _checked(lw, family, 1)


def online_update(post: PosteriorState, family: ParameterFamily, segment) -> PosteriorState:
    """Add the transition log-likelihood of ``segment`` (rows of ``(s, a, s')``)."""
    _check_family(post, family)
    seg = np.asarray(segment, dtype=np.int64).reshape(-1, 3)
    if seg.shape[0] == 0:
        return post
    ll = family.log_transitions[:, seg[:, 0], seg[:, 1], seg[:, 2]].sum(axis=1)
    with np.errstate(invalid="ignore"):
        lw = post.log_weights + ll
    lw = np.where(np.isnan(lw), -np.inf, lw)
    return _checked(lw, family, post.epoch + 1)


def sample_member(post: PosteriorState, rng) -> int:
    """Inverse-CDF draw of a member index from the normalized weights."""
    w = post.weights
    cdf = np.cumsum(w)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= w.size or w[idx] == 0:
        idx = int(np.flatnonzero(w > 0)[-1])
    return idx


def class_masses(post: PosteriorState, family: ParameterFamily) -> np.ndarray:
    return np.bincount(family.policy_classes, weights=post.weights)


def mismatch_probability(post: PosteriorState, family: ParameterFamily) -> float:
    """Probability that two independent posterior draws have different optimal policies."""
    _check_family(post, family)
    p = class_masses(post, family)
    return float(max(0.0, 1.0 - p @ p))
