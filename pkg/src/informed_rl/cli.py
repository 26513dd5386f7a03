"""Command-line entry point: ``informed-rl <subcommand> ...``.

Global flags ``--seed``, ``--out`` and ``--threads`` may appear before or
after the subcommand. Without ``--out`` JSON results go to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from .envs import ParameterFamily, family_around, make_random_family, make_riverswim
from .expert import OfflineDataset
from .harness import (
    ConfigError,
    ExpertConfig,
    cumulative_regret,
    draw_member,
    estimate_epsilon,
    expert_dataset,
    lemma2_check,
    run_experiment,
    stream,
    theorem1_bound,
)
from .ipsrl import EpisodeSchedule, run_ipsrl
from .irlsvi import LossHyper, OptimOptions, run_irlsvi


def _lam(text) -> float:
    return math.inf if str(text).lower() in ("inf", "infinity") else float(text)


def _emit(doc, out) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="master seed")
    parser.add_argument("--out", default=d(None), help="output file or directory")
    parser.add_argument("--threads", type=int, default=d(1), help="worker processes (no effect on results)")


def cmd_generate_family(args) -> int:
    if args.kind == "random":
        fam = make_random_family(args.states, args.actions, args.size, args.min_prob, args.seed)
    else:
        base = make_riverswim(args.states, args.right_success)
        fam = family_around(base, args.size, args.perturbation, args.seed)
    _emit(fam.to_dict(), args.out)
    return 0


def cmd_generate_offline(args) -> int:
    fam = ParameterFamily.load(args.family)
    expert = ExpertConfig(args.beta, _lam(args.lam), args.start_state)
    data = expert_dataset(fam, args.member, expert, args.steps, np.random.default_rng(args.seed))
    data.meta["seed"] = args.seed
    _emit(data.to_dict(), args.out)
    return 0


def _load_data(args, fam):
    """Dataset and the true member it fixes, or (None, None) for the uninformed baseline."""
    if not args.dataset:
        return None, None
    data = OfflineDataset.load(args.dataset)
    member = data.meta.get("true_member_index")
    if member is None or not 0 <= int(member) < len(fam):
        raise SystemExit("dataset meta lacks a valid true_member_index")
    return data, int(member)


def _write_traces(args, traces) -> None:
    out = Path(args.out) if args.out else None
    if out is None:
        print(json.dumps([t.summary() for t in traces], indent=2, default=float))
        return
    out.mkdir(parents=True, exist_ok=True)
    for i, tr in enumerate(traces):
        (out / f"trace_{i:04d}.json").write_text(json.dumps(tr.summary(), indent=2, default=float) + "\n")
    with open(out / "regret.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "t", "cumulative_regret"])
        for i, tr in enumerate(traces):
            reg = cumulative_regret(tr)
            for t in range(args.every, tr.horizon + 1, args.every):
                w.writerow([i, t, repr(float(reg[t - 1]))])


def _runs(args, fam, agent):
    data, fixed = _load_data(args, fam)
    traces = []
    for i in range(args.runs):
        m = fixed if fixed is not None else draw_member(fam.prior, stream(args.seed, 0, i))
        traces.append(agent(m, data, stream(args.seed, 2, 0, i)))
    return traces


def cmd_run_ipsrl(args) -> int:
    fam = ParameterFamily.load(args.family)
    schedule = EpisodeSchedule.parse(args.schedule)

    def agent(m, data, rng):
        beta = args.beta if args.beta is not None else (data.meta.get("beta", 0.0) if data else 0.0)
        return run_ipsrl(fam, m, data, beta, schedule, args.horizon, rng)

    _write_traces(args, _runs(args, fam, agent))
    return 0


def cmd_run_irlsvi(args) -> int:
    fam = ParameterFamily.load(args.family)
    schedule = EpisodeSchedule.parse(args.schedule)
    hyper = LossHyper(sigma=args.sigma, lambda2=args.lambda2, prior_precision=args.prior_prec, beta_est=args.beta_est)
    opts = OptimOptions(outer_iters=args.outer_iters, inner_iters=args.inner_iters, learning_rate=args.learning_rate)

    def agent(m, data, rng):
        tr = run_irlsvi(fam.members[m], data, schedule, args.horizon, hyper, opts, rng, true_gain=fam.plans[m].gain)
        tr.true_member = m
        tr.info.pop("final_qtable", None)
        return tr

    _write_traces(args, _runs(args, fam, agent))
    return 0


def cmd_estimate_epsilon(args) -> int:
    fam = ParameterFamily.load(args.family)
    expert = ExpertConfig(args.beta, _lam(args.lam), args.start_state)
    est, se = estimate_epsilon(fam, expert, args.N, args.runs, args.seed)
    _emit({"N": args.N, "runs": args.runs, "estimate": est, "stderr": se}, args.out)
    return 0


def cmd_bound(args) -> int:
    S, A, vbar = args.S, args.A, args.vbar
    if args.family:
        fam = ParameterFamily.load(args.family)
        S, A = fam.num_states, fam.num_actions
        vbar = fam.span if vbar is None else vbar
    if None in (S, A, vbar):
        raise SystemExit("bound needs --family or all of --S --A --vbar")
    rep = theorem1_bound(args.epsilon, S, A, args.horizon, EpisodeSchedule.parse(args.schedule), vbar)
    _emit(rep.to_dict(), args.out)
    return 0


def cmd_check_lemma2(args) -> int:
    fam = ParameterFamily.load(args.family)
    expert = ExpertConfig(args.beta, math.inf, args.start_state)
    rep = lemma2_check(fam, expert, args.N, args.runs, args.seed)
    _emit({k: getattr(rep, k) for k in rep.__dataclass_fields__}, args.out)
    return 0 if rep.passed else 1


def cmd_experiment(args) -> int:
    path = Path(args.config)
    cfg = json.loads(path.read_text())
    if args.seed_override:
        cfg["master_seed"] = args.seed
    out = args.out or "results"
    try:
        res = run_experiment(cfg, out, threads=args.threads, base_dir=path.parent)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {len(res.files)} files to {out} (output digest {res.digest})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="informed-rl", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, parents=[common], help=help_text)
        sp.set_defaults(func=func)
        return sp

    sp = add("generate-family", cmd_generate_family, "write a parameter family as JSON")
    sp.add_argument("--kind", choices=["random", "riverswim"], default="random")
    sp.add_argument("--states", type=int, default=5)
    sp.add_argument("--actions", type=int, default=3)
    sp.add_argument("--size", type=int, default=20)
    sp.add_argument("--min-prob", type=float, default=0.01)
    sp.add_argument("--perturbation", type=float, default=0.1)
    sp.add_argument("--right-success", type=float, default=0.6)

    sp = add("generate-offline", cmd_generate_offline, "simulate an expert dataset")
    sp.add_argument("--family", required=True)
    sp.add_argument("--member", type=int, required=True)
    sp.add_argument("--beta", type=float, required=True)
    sp.add_argument("--lambda", dest="lam", default="inf")
    sp.add_argument("--steps", type=int, required=True)
    sp.add_argument("--start-state", type=int, default=0)

    for name, func, text in (
        ("run-ipsrl", cmd_run_ipsrl, "online runs of informed posterior sampling"),
        ("run-irlsvi", cmd_run_irlsvi, "online runs of the randomized-loss agent"),
    ):
        sp = add(name, func, text)
        sp.add_argument("--family", required=True)
        sp.add_argument("--dataset", help="offline data; fixes the true member (omit for the uninformed baseline)")
        sp.add_argument("--schedule", default="linear", help="linear | eps:<x> | const:<n> | explicit:<n1,n2,...>")
        sp.add_argument("--horizon", type=int, required=True)
        sp.add_argument("--runs", type=int, default=1)
        sp.add_argument("--every", type=int, default=1, help="write every k-th step to regret.csv")
        if name == "run-ipsrl":
            sp.add_argument("--beta", type=float, help="expert beta known to the agent (default: dataset meta)")
        else:
            sp.add_argument("--sigma", type=float, default=1.0)
            sp.add_argument("--lambda2", type=float, default=1.0)
            sp.add_argument("--prior-prec", type=float, default=1.0)
            sp.add_argument("--beta-est", choices=["map", "entropy"], default="map")
            sp.add_argument("--outer-iters", type=int, default=10)
            sp.add_argument("--inner-iters", type=int, default=200)
            sp.add_argument("--learning-rate", type=float, default=0.1)

    sp = add("estimate-epsilon", cmd_estimate_epsilon, "Monte Carlo initial mismatch probability")
    sp.add_argument("--family", required=True)
    sp.add_argument("--beta", type=float, default=10.0)
    sp.add_argument("--lambda", dest="lam", default="inf")
    sp.add_argument("--N", type=int, required=True)
    sp.add_argument("--runs", type=int, default=200)
    sp.add_argument("--start-state", type=int, default=0)

    sp = add("bound", cmd_bound, "evaluate the prior-dependent regret bound")
    sp.add_argument("--epsilon", type=float, required=True)
    sp.add_argument("--horizon", type=int, required=True)
    sp.add_argument("--schedule", default="linear")
    sp.add_argument("--family", help="take S, A and the span from a family file")
    sp.add_argument("--S", type=int)
    sp.add_argument("--A", type=int)
    sp.add_argument("--vbar", type=float)

    sp = add("check-lemma2", cmd_check_lemma2, "sampled-policy vs majority-vote mismatch check")
    sp.add_argument("--family", required=True)
    sp.add_argument("--beta", type=float, default=10.0)
    sp.add_argument("--N", type=int, required=True)
    sp.add_argument("--runs", type=int, default=2000)
    sp.add_argument("--start-state", type=int, default=0)

    sp = add("experiment", cmd_experiment, "run a config of regret sweeps and write reports")
    sp.add_argument("config")
    sp.add_argument("--seed-override", action="store_true", help="replace the config's master_seed with --seed")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
