"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 behavior-policy
support violation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import __version__
from .bias_bound import (
    corollary1_bound,
    corollary2_bound,
    lemma1_bound,
    surrogate_bound,
    theorem1_bound,
)
from .bootstrap import BootstrapConfig, lower_bound
from .errors import ConfigError, HcopeError, SupportViolation
from .experiments import (
    ENVS,
    ESTIMATORS,
    SweepConfig,
    config_text,
    emit_csv,
    load_config,
    make_estimator,
    make_problem,
    policy_for,
    resolve_env,
    run_sweep,
)
from .envs import monte_carlo_ground_truth, sample_dataset
from .mdp import load_dataset, save_dataset
from .models import MODEL_KINDS, learn_regression, learn_tabular
from .policies import support_check

BIAS_VARIANTS = ("surrogate", "corollary2", "lemma1", "theorem1", "corollary1")


def _write(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _problem_for_dataset(ds, pi_e, pi_b, micro_index):
    """Environment and policies for a dataset; the behavior policy defaults to the recorded one."""
    env_id, micro_index = resolve_env(ds.env_id or "", micro_index)
    if env_id not in ENVS:
        raise ConfigError(f"dataset env {ds.env_id!r} is not a known environment")
    problem = make_problem(env_id, pi_e, "", micro_index)
    name = pi_b or ds.behavior_policy_id
    if name:
        problem.pi_b = policy_for(env_id, name, micro_index)
    return problem


def cmd_generate(args) -> int:
    env_id, idx = resolve_env(args.env, args.micro_index)
    problem = make_problem(env_id, micro_index=idx)
    policy = policy_for(env_id, args.policy, idx) if args.policy else problem.pi_b
    rng = np.random.default_rng(args.seed)
    ds = sample_dataset(problem.env, policy, args.n, rng)
    if not args.out:
        raise ConfigError("generate needs --out")
    save_dataset(ds, args.out)
    return 0


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.dataset)
    problem = _problem_for_dataset(ds, args.pi_e, args.pi_b, args.micro_index)
    report = support_check(problem.pi_e, problem.pi_b, ds)
    if not report:
        raise SupportViolation(f"behavior support violation at trajectory {report.trajectory}, step {report.step}",
                               report.trajectory, report.step)
    est = make_estimator(args.estimator, problem.env, args.mb_rollouts, args.rollouts_per_state, args.seed)
    cfg = BootstrapConfig(args.bootstrap_b, args.delta, args.method, seed=args.seed, workers=args.workers)
    rep = lower_bound(ds, est, problem.pi_e, problem.pi_b, cfg)
    _write(rep.to_text(), args.out)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config) if args.config else SweepConfig()
    overrides = {k: v for k, v in (("seed", args.seed), ("workers", args.workers), ("delta", args.delta),
                                   ("B", args.bootstrap_b), ("trials", args.trials)) if v is not None}
    cfg = replace(cfg, **overrides)
    def progress(n, t):
        print(f"n={n} trial={t} done", file=sys.stderr)
    res = run_sweep(cfg, progress if args.verbose else None)
    out = args.out or "sweep.csv"
    emit_csv(res, out)
    if args.figures:
        from .plotting import render_figures
        for path in render_figures(res, args.figures):
            print(f"figure: {path}", file=sys.stderr)
    if args.verbose:
        print(config_text(cfg), file=sys.stderr, end="")
    return 0


def cmd_ground_truth(args) -> int:
    env_id, idx = resolve_env(args.env, args.micro_index)
    problem = make_problem(env_id, micro_index=idx)
    policy = policy_for(env_id, args.policy, idx) if args.policy else problem.pi_e
    value, stderr = monte_carlo_ground_truth(problem.env, policy, args.rollouts, np.random.default_rng(args.seed))
    _write(f"env: {problem.env.env_id}\npolicy: {policy.policy_id}\nrollouts: {args.rollouts}\n"
           f"value: {value!r}\nstderr: {stderr!r}\n", args.out)
    return 0


def cmd_bias_bound(args) -> int:
    ds = load_dataset(args.dataset)
    problem = _problem_for_dataset(ds, args.pi_e, args.pi_b, args.micro_index)
    env = problem.env
    if args.model == "tabular":
        if not getattr(env, "discrete", False):
            raise ConfigError("tabular models need a discrete environment")
        model = learn_tabular(ds, env.state_count, env.action_count)
    else:
        model = learn_regression(ds, args.model)
    if args.variant == "surrogate":
        rep = surrogate_bound(ds, model, problem.pi_e, problem.pi_b, env.spec, args.surrogate)
    elif args.variant == "corollary2":
        rep = corollary2_bound(ds, model, args.alpha, env.spec)
    else:
        if not hasattr(env, "P") or args.model != "tabular":
            raise ConfigError(f"{args.variant} enumerates the true MDP; it needs a micro-MDP and a tabular model")
        fn = {"lemma1": lambda: lemma1_bound(env, model, problem.pi_e),
              "theorem1": lambda: theorem1_bound(env, model, problem.pi_e, problem.pi_b),
              "corollary1": lambda: corollary1_bound(env, model, problem.pi_e, problem.pi_b)}[args.variant]
        rep = fn()
    _write(rep.to_text(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcope", description="High-confidence off-policy evaluation bounds.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=0):
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--out", help="output file (default: stdout)")
        sp.add_argument("--micro-index", type=int, default=2, help="which micro-MDP for micro-mdp-v0")

    g = sub.add_parser("generate", help="sample a dataset of trajectories")
    g.add_argument("--env", required=True)
    g.add_argument("--policy", default="", help="policy name (default: the behavior policy)")
    g.add_argument("--n", type=int, required=True)
    common(g)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="bootstrap lower bound for one dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--estimator", required=True, choices=ESTIMATORS)
    e.add_argument("--pi-e", default="")
    e.add_argument("--pi-b", default="", help="default: the policy recorded in the dataset")
    e.add_argument("--delta", type=float, default=0.05)
    e.add_argument("--bootstrap-b", type=int, default=2000)
    e.add_argument("--method", choices=("percentile", "bca"), default="percentile")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--mb-rollouts", type=int, default=1000)
    e.add_argument("--rollouts-per-state", type=int, default=50)
    common(e)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="lower bounds and error rates over dataset sizes, as CSV")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--delta", type=float)
    s.add_argument("--bootstrap-b", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--out", help="CSV path (default: sweep.csv)")
    s.add_argument("--figures", metavar="DIR", help="also render PNG figures into DIR")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("ground-truth", help="Monte Carlo value of a policy")
    t.add_argument("--env", required=True)
    t.add_argument("--policy", default="", help="policy name (default: the evaluation policy)")
    t.add_argument("--rollouts", type=int, default=100_000)
    common(t)
    t.set_defaults(func=cmd_ground_truth)

    b = sub.add_parser("bias-bound", help="model-bias bound for a dataset")
    b.add_argument("--dataset", required=True)
    b.add_argument("--model", choices=MODEL_KINDS, default="tabular")
    b.add_argument("--variant", choices=BIAS_VARIANTS, default="surrogate")
    b.add_argument("--surrogate", choices=("cross-entropy", "nll"), default="cross-entropy")
    b.add_argument("--alpha", type=float, default=0.05)
    b.add_argument("--pi-e", default="")
    b.add_argument("--pi-b", default="")
    common(b)
    b.set_defaults(func=cmd_bias_bound)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except HcopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
