"""Monte Carlo experiment engine: Bayesian regret, mismatch estimation and regret bounds.

Random streams are derived from a master seed with :class:`numpy.random.SeedSequence`
by a fixed counter scheme, so results do not depend on execution order:

* true member of run ``i``:              ``(master, 0, i)``
* offline dataset of run ``i``, size N:  ``(master, 1, i, N)``
* agent randomness, cell ``c``, run ``i``: ``(master, 2, c, i)``
* mismatch estimation at size N, run ``i``: ``(master, 3, N, i)``
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .envs import ParameterFamily, family_around, make_random_family, make_riverswim
from .expert import Competence, OfflineDataset, expert_policy, generate_offline, majority_estimator
from .ipsrl import EpisodeSchedule, RunTrace, episodes_started, run_ipsrl, schedule_lengths
from .irlsvi import LossHyper, OptimOptions, run_irlsvi
from .posterior import informed_prior, mismatch_probability


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the field path."""


def stream(*key: int) -> np.random.Generator:
    """Generator for the counter key ``(master_seed, *counters)``."""
    master, *counters = (int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=tuple(counters)))


def stderr(x: np.ndarray, axis: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = x.shape[axis]
    if n < 2:
        return np.zeros_like(np.take(x, 0, axis=axis))
    return x.std(axis=axis, ddof=1) / math.sqrt(n)


# --------------------------------------------------------------------------- regret


def cumulative_regret(trace: RunTrace) -> np.ndarray:
    """Partial sums of ``true_gain - r_t``."""
    return np.cumsum(trace.true_gain - trace.rewards)


def martingale_correction(trace: RunTrace, mdp, bias: np.ndarray) -> np.ndarray:
    """Partial sums of ``v(s_{t+1}) - E[v(s_{t+1}) | s_t, a_t]`` under the true MDP.

    Zero-mean for every policy, so adding it to :func:`cumulative_regret`
    gives an unbiased, far less noisy regret estimate (bounded-span
    telescoping form ``sum of action gaps + v(s_T) - v(s_0)``).
    """
    s, a, s_next = trace.states[:-1], trace.actions, trace.states[1:]
    expected = np.einsum("tj,j->t", mdp.transitions[s, a], bias)
    return np.cumsum(bias[s_next] - expected)


def control_variate_regret(trace: RunTrace, mdp, bias: np.ndarray) -> np.ndarray:
    return cumulative_regret(trace) + martingale_correction(trace, mdp, bias)


@dataclass
class RegretReport:
    checkpoints: list
    mean_regret: np.ndarray
    stderr: np.ndarray
    runs: int
    config_digest: str = ""
    per_run: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_curves(cls, curves: np.ndarray, checkpoints: Sequence[int], digest: str = "") -> "RegretReport":
        """``curves`` has one row of regret-at-checkpoint per run."""
        curves = np.asarray(curves, dtype=float).reshape(-1, len(checkpoints))
        return cls(list(checkpoints), curves.mean(axis=0), stderr(curves), curves.shape[0], digest, curves)


# --------------------------------------------------------------------------- expert data


@dataclass(frozen=True)
class ExpertConfig:
    beta: float = 10.0
    lam: float = math.inf
    start_state: int = 0

    @property
    def competence(self) -> Competence:
        return Competence(self.beta, self.lam)


def draw_member(prior: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(prior)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(prior) - 1)


def expert_dataset(
    family: ParameterFamily, member: int, expert: ExpertConfig, steps: int, rng: np.random.Generator
) -> OfflineDataset:
    policy = expert_policy(family.qtables[member], expert.competence, rng)
    return generate_offline(
        family.members[member],
        policy,
        steps,
        expert.start_state,
        rng,
        beta=expert.beta,
        **{"lambda": expert.lam},
        true_member_index=int(member),
    )


def _seed_key(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)


def estimate_epsilon(
    family: ParameterFamily, expert: ExpertConfig, offline_N: int, runs: int, seed=0
) -> tuple[float, float]:
    """Rao-Blackwellized estimate of the initial mismatch probability and its standard error.

    Each run draws the true member from the prior, generates expert data and
    records the exact conditional mismatch of the informed prior.
    """
    if runs < 1:
        raise ValueError("runs must be at least 1")
    vals = np.empty(runs)
    key = _seed_key(seed)
    for i in range(runs):
        rng = stream(*key, i)
        m = draw_member(family.prior, rng)
        data = expert_dataset(family, m, expert, offline_N, rng)
        vals[i] = mismatch_probability(informed_prior(family, data, expert.beta), family)
    return float(vals.mean()), float(stderr(vals))


def upper_epsilon(estimate: float, se: float, horizon: int) -> float:
    """``estimate + 2 se`` clamped to ``[1/horizon, 1]``."""
    return float(min(1.0, max(estimate + 2.0 * se, 1.0 / horizon)))


# --------------------------------------------------------------------------- bound


@dataclass(frozen=True)
class BoundReport:
    epsilon: float
    r1: float
    r2: float
    r3: float
    total: float
    inputs: dict

    def to_dict(self) -> dict:
        return asdict(self)


def theorem1_bound(
    epsilon: float, S: int, A: int, horizon: int, schedule: EpisodeSchedule, vbar: float
) -> BoundReport:
    """Prior-dependent Bayesian regret bound ``3 vbar + 2 vbar (R1 + R2 + R3)`` for inf-iPSRL.

    ``max T_k`` uses the schedule's untruncated lengths of the ``K_T`` episodes
    started before ``horizon``. R2 uses natural logs, R3 a base-2 log.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if S < 1 or A < 1 or horizon < 1 or vbar < 0:
        raise ValueError("S, A, horizon must be positive and vbar nonnegative")
    T = horizon
    K = episodes_started(schedule, T)
    max_len = max(schedule.length(k) for k in range(1, K + 1))
    SA = S * A
    r1 = epsilon * K
    r2 = math.sqrt(epsilon * S * S * A * T * math.log(2 * SA * K * T) * (1.0 + math.log(T / SA + 1.0)))
    r3 = min(epsilon * T, SA * max_len * math.log2(T / SA + 1.0))
    total = 3.0 * vbar + 2.0 * vbar * (r1 + r2 + r3)
    inputs = {"S": S, "A": A, "T": T, "K_T": K, "max_Tk": max_len, "vbar": vbar}
    return BoundReport(float(epsilon), r1, r2, r3, total, inputs)


# --------------------------------------------------------------------------- statistical checks


@dataclass(frozen=True)
class Lemma2Report:
    p1: float
    p2: float
    se1: float
    se2: float
    pooled_se: float
    runs: int
    passed: bool


def lemma2_check(
    family: ParameterFamily, expert: ExpertConfig, offline_N: int, runs: int, seed=0
) -> Lemma2Report:
    """Check ``Pr(sampled policy != pi*) <= 2 Pr(majority estimate != pi*)`` by Monte Carlo.

    The first probability uses the exact conditional mismatch; the pooled
    standard error is that of the per-run paired difference ``m_i - 2 e_i``.
    """
    key = _seed_key(seed)
    m_vals = np.empty(runs)
    e_vals = np.empty(runs)
    for i in range(runs):
        rng = stream(*key, i)
        m = draw_member(family.prior, rng)
        data = expert_dataset(family, m, expert, offline_N, rng)
        m_vals[i] = mismatch_probability(informed_prior(family, data, expert.beta), family)
        est = majority_estimator(data, family.num_states, family.num_actions)
        e_vals[i] = float(not np.array_equal(est.actions, family.policies[m]))
    p1, p2 = float(m_vals.mean()), float(e_vals.mean())
    pooled = float(stderr(m_vals - 2.0 * e_vals))
    passed = p1 <= 2.0 * p2 + 3.0 * pooled
    return Lemma2Report(p1, p2, float(stderr(m_vals)), float(stderr(e_vals)), pooled, runs, passed)


def mismatch_by_episode(
    family: ParameterFamily,
    expert: ExpertConfig,
    offline_N: int,
    schedule: EpisodeSchedule,
    episodes: int,
    runs: int,
    seed=0,
) -> tuple[np.ndarray, np.ndarray]:
    """Rao-Blackwellized ``Pr(sampled policy of episode k != pi*)`` for ``k = 1..episodes``.

    Returns per-episode means and standard errors.
    """
    horizon = sum(schedule.length(k) for k in range(1, episodes + 1))
    key = _seed_key(seed)
    vals = np.empty((runs, episodes))
    for i in range(runs):
        rng = stream(*key, i)
        m = draw_member(family.prior, rng)
        data = expert_dataset(family, m, expert, offline_N, rng)
        trace = run_ipsrl(family, m, data, expert.beta, schedule, horizon, rng)
        vals[i] = [e.mismatch_prob for e in trace.episodes[:episodes]]
    return vals.mean(axis=0), stderr(vals)


# --------------------------------------------------------------------------- experiment config


def _require(doc: dict, key: str, path: str, types):
    if key not in doc:
        raise ConfigError(f"{path}.{key}: missing")
    val = doc[key]
    if isinstance(val, bool) or not isinstance(val, types):
        raise ConfigError(f"{path}.{key}: expected {types}, got {type(val).__name__}")
    return val


def _lam(value, path: str) -> float:
    if value in (None, "inf", "Infinity") or value == math.inf:
        return math.inf
    if isinstance(value, (int, float)) and value > 0:
        return float(value)
    raise ConfigError(f"{path}: lambda must be positive or 'inf'")


def validate_config(cfg: dict) -> dict:
    """Check an experiment config and fill defaults. Errors name the offending field."""
    if not isinstance(cfg, dict):
        raise ConfigError("config: expected a JSON object")
    out = dict(cfg)
    fam = _require(cfg, "family", "config", dict)
    kind = fam.get("kind", "random")
    if kind == "random":
        for k in ("num_states", "num_actions", "family_size"):
            v = _require(fam, k, "family", int)
            if v < 1:
                raise ConfigError(f"family.{k}: must be positive")
    elif kind == "riverswim_around":
        _require(fam, "family_size", "family", int)
        _require(fam, "perturbation", "family", (int, float))
    elif kind == "file":
        _require(fam, "path", "family", str)
    else:
        raise ConfigError(f"family.kind: unknown kind {kind!r}")

    ex = _require(cfg, "expert", "config", dict)
    beta = _require(ex, "beta", "expert", (int, float))
    if beta < 0:
        raise ConfigError("expert.beta: must be nonnegative")
    _lam(ex.get("lambda", "inf"), "expert.lambda")
    grid = _require(ex, "N_grid", "expert", list)
    for j, n in enumerate(grid):
        if not isinstance(n, int) or n < 0:
            raise ConfigError(f"expert.N_grid[{j}]: must be a nonnegative integer")

    agents = _require(cfg, "agents", "config", list)
    for j, ag in enumerate(agents):
        p = f"agents[{j}]"
        if not isinstance(ag, dict):
            raise ConfigError(f"{p}: expected an object")
        if ag.get("type") not in ("ipsrl", "irlsvi"):
            raise ConfigError(f"{p}.type: must be 'ipsrl' or 'irlsvi'")
        sched = ag.get("schedule", "linear")
        if sched != "eps:auto":
            try:
                EpisodeSchedule.parse(sched)
            except ValueError as exc:
                raise ConfigError(f"{p}.schedule: {exc}") from None
        for sub in ("hyper", "opts"):
            if sub in ag and not isinstance(ag[sub], dict):
                raise ConfigError(f"{p}.{sub}: expected an object")

    horizon = _require(cfg, "horizon", "config", int)
    if horizon < 1:
        raise ConfigError("config.horizon: must be positive")
    runs = _require(cfg, "runs", "config", int)
    if runs < 1:
        raise ConfigError("config.runs: must be positive")
    cps = cfg.get("checkpoints", [horizon])
    if not isinstance(cps, list) or not cps:
        raise ConfigError("config.checkpoints: expected a nonempty list")
    for j, c in enumerate(cps):
        if not isinstance(c, int) or not 1 <= c <= horizon:
            raise ConfigError(f"config.checkpoints[{j}]: must be an integer in [1, horizon]")
    out["checkpoints"] = sorted(cps)
    _require(cfg, "master_seed", "config", int)
    out.setdefault("epsilon_runs", runs)
    return out


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def build_family(fam: dict, base_dir: Path | None = None) -> ParameterFamily:
    kind = fam.get("kind", "random")
    if kind == "random":
        return make_random_family(
            fam["num_states"], fam["num_actions"], fam["family_size"], fam.get("min_prob", 0.01), fam.get("seed", 0)
        )
    if kind == "riverswim_around":
        base = make_riverswim(fam.get("num_states", 6), fam.get("right_success", 0.6))
        return family_around(base, fam["family_size"], fam["perturbation"], fam.get("seed", 0))
    path = Path(fam["path"])
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return ParameterFamily.load(path)


def load_golden_config() -> dict:
    return json.loads((Path(__file__).parent / "configs" / "golden.json").read_text())


# --------------------------------------------------------------------------- experiment


@dataclass(frozen=True)
class Cell:
    index: int
    agent: str
    schedule: str
    offline_N: int
    hyper: dict
    opts: dict

    @property
    def name(self) -> str:
        sched = self.schedule.replace(":", "").replace(",", "-").replace(".", "p")
        return f"{self.agent}_{sched}_N{self.offline_N}"


def _make_cells(cfg: dict) -> list[Cell]:
    cells = []
    for ag in cfg["agents"]:
        for n in cfg["expert"]["N_grid"]:
            cells.append(
                Cell(len(cells), ag["type"], ag.get("schedule", "linear"), n, ag.get("hyper", {}), ag.get("opts", {}))
            )
    return cells


def _hyper(d: dict) -> LossHyper:
    d = dict(d)
    if "prior_prec" in d:
        d["prior_precision"] = d.pop("prior_prec")
    return LossHyper(**d)


_FAMILY_CACHE: dict = {}


def _cached_family(cfg: dict, base_dir) -> ParameterFamily:
    key = json.dumps(cfg["family"], sort_keys=True) + str(base_dir)
    if key not in _FAMILY_CACHE:
        _FAMILY_CACHE[key] = build_family(cfg["family"], base_dir)
    return _FAMILY_CACHE[key]


def _run_cell(args) -> np.ndarray:
    """Regret at checkpoints for the given runs, shape (runs, 2, checkpoints): realized, control variate."""
    cfg, base_dir, cell, schedule_text, run_ids = args
    family = _cached_family(cfg, base_dir)
    ex = cfg["expert"]
    expert = ExpertConfig(ex["beta"], _lam(ex.get("lambda", "inf"), "expert.lambda"), ex.get("start_state", 0))
    schedule = EpisodeSchedule.parse(schedule_text)
    seed = cfg["master_seed"]
    horizon = cfg["horizon"]
    idx = np.asarray(cfg["checkpoints"]) - 1
    out = np.empty((len(run_ids), 2, idx.size))
    for j, i in enumerate(run_ids):
        m = draw_member(family.prior, stream(seed, 0, i))
        data = expert_dataset(family, m, expert, cell.offline_N, stream(seed, 1, i, cell.offline_N))
        rng = stream(seed, 2, cell.index, i)
        if cell.agent == "ipsrl":
            trace = run_ipsrl(family, m, data, expert.beta, schedule, horizon, rng)
        else:
            trace = run_irlsvi(
                family.members[m],
                data,
                schedule,
                horizon,
                _hyper(cell.hyper),
                OptimOptions(**cell.opts),
                rng,
                true_gain=family.plans[m].gain,
            )
        out[j, 0] = cumulative_regret(trace)[idx]
        out[j, 1] = control_variate_regret(trace, family.members[m], family.plans[m].bias)[idx]
    return out


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@dataclass
class ExperimentResult:
    reports: dict
    cv_reports: dict
    bounds: dict
    epsilon: dict
    comparisons: list
    digest: str
    files: list


def run_experiment(config, out_dir=None, threads: int = 1, base_dir=None) -> ExperimentResult:
    """Run every (agent, N) cell of a config and write CSV/JSON reports.

    ``config`` is a dict or a path to a JSON file. ``threads`` only changes how
    many worker processes share the runs; outputs are identical for any value.
    """
    if not isinstance(config, dict):
        path = Path(config)
        base_dir = base_dir or path.parent
        config = json.loads(path.read_text())
    cfg = validate_config(config)
    digest = config_digest(cfg)
    family = _cached_family(cfg, base_dir)
    ex = cfg["expert"]
    expert = ExpertConfig(ex["beta"], _lam(ex.get("lambda", "inf"), "expert.lambda"), ex.get("start_state", 0))
    horizon, runs, cps, seed = cfg["horizon"], cfg["runs"], cfg["checkpoints"], cfg["master_seed"]
    S, A, vbar = family.num_states, family.num_actions, family.span

    eps = {}
    for n in ex["N_grid"]:
        est, se = estimate_epsilon(family, expert, n, cfg["epsilon_runs"], (seed, 3, n))
        eps[n] = {"N": n, "estimate": est, "stderr": se, "upper": upper_epsilon(est, se, horizon)}

    cells = _make_cells(cfg)
    schedules = {}
    for c in cells:
        schedules[c.index] = f"eps:{eps[c.offline_N]['upper']!r}" if c.schedule == "eps:auto" else c.schedule

    chunks = max(1, int(threads))
    tasks = []
    for c in cells:
        for part in np.array_split(np.arange(runs), chunks):
            if part.size:
                tasks.append((cfg, base_dir, c, schedules[c.index], part.tolist()))
    if chunks > 1 and tasks:
        with ProcessPoolExecutor(max_workers=chunks) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]
    curves: dict = {c.index: [] for c in cells}
    for task, res in zip(tasks, results):
        curves[task[2].index].append(res)

    reports, cv_reports, bounds = {}, {}, {}
    for c in cells:
        stacked = np.concatenate(curves[c.index], axis=0)
        reports[c.name] = RegretReport.from_curves(stacked[:, 0], cps, digest)
        cv_reports[c.name] = RegretReport.from_curves(stacked[:, 1], cps, digest)
        if c.agent == "ipsrl":
            sched = EpisodeSchedule.parse(schedules[c.index])
            bounds[c.name] = [
                theorem1_bound(eps[c.offline_N]["estimate"], S, A, cp, sched, vbar) for cp in cps
            ]

    comparisons = []
    for c in cells:
        if c.offline_N == 0:
            continue
        base = next((b for b in cells if b.offline_N == 0 and b.agent == c.agent and b.schedule == c.schedule), None)
        if base is None:
            continue
        diff = reports[c.name].per_run - reports[base.name].per_run
        cv_diff = cv_reports[c.name].per_run - cv_reports[base.name].per_run
        for j, cp in enumerate(cps):
            comparisons.append(
                {
                    "cell": c.name,
                    "baseline": base.name,
                    "checkpoint": cp,
                    "mean_informed": float(reports[c.name].mean_regret[j]),
                    "mean_uninformed": float(reports[base.name].mean_regret[j]),
                    "mean_difference": float(diff[:, j].mean()),
                    "paired_stderr": float(stderr(diff[:, j])),
                    "cv_mean_difference": float(cv_diff[:, j].mean()),
                    "cv_paired_stderr": float(stderr(cv_diff[:, j])),
                }
            )

    files = {}
    for c in cells:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run", "checkpoint", "cumulative_regret", "cv_regret"])
        per_run, cv_run = reports[c.name].per_run, cv_reports[c.name].per_run
        for i in range(per_run.shape[0]):
            for j, cp in enumerate(cps):
                w.writerow([i, cp, _fmt(per_run[i, j]), _fmt(cv_run[i, j])])
        files[f"regret_{c.name}.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "checkpoint", "mean", "stderr", "bound_total", "cv_mean", "cv_stderr"])
    for c in cells:
        rep, cv = reports[c.name], cv_reports[c.name]
        for j, cp in enumerate(cps):
            bt = _fmt(bounds[c.name][j].total) if c.name in bounds else ""
            w.writerow(
                [c.name, cp, _fmt(rep.mean_regret[j]), _fmt(rep.stderr[j]), bt, _fmt(cv.mean_regret[j]), _fmt(cv.stderr[j])]
            )
    files["summary.csv"] = buf.getvalue()

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [
        "cell",
        "baseline",
        "checkpoint",
        "mean_informed",
        "mean_uninformed",
        "mean_difference",
        "paired_stderr",
        "cv_mean_difference",
        "cv_paired_stderr",
    ]
    w.writerow(cols)
    for row in comparisons:
        w.writerow([row[k] if isinstance(row[k], (str, int)) else _fmt(row[k]) for k in cols])
    files["comparison.csv"] = buf.getvalue()

    files["bounds.json"] = json.dumps(
        {name: [b.to_dict() for b in bs] for name, bs in bounds.items()}, indent=2, sort_keys=True
    )
    files["epsilon.json"] = json.dumps({str(k): v for k, v in eps.items()}, indent=2, sort_keys=True)
    out_digest = hashlib.sha256()
    for name in sorted(files):
        out_digest.update(name.encode())
        out_digest.update(files[name].encode())
    files["manifest.json"] = json.dumps(
        {
            "config_digest": digest,
            "output_digest": out_digest.hexdigest(),
            "cells": [c.name for c in cells],
            "family": {"size": len(family), "S": S, "A": A, "span": vbar, "gap": family.gap},
        },
        indent=2,
        sort_keys=True,
    )
    written = []
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name in sorted(files):
            _write_atomic(out / name, files[name])
            written.append(out / name)
    return ExperimentResult(reports, cv_reports, bounds, eps, comparisons, out_digest.hexdigest(), written)
