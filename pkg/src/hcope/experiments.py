"""Lower-bound sweeps over dataset size: the harness behind the CLI ``sweep``.

For each dataset size ``n`` and trial, a fresh dataset is drawn from the
behavior policy and every configured estimator computes a bootstrap lower
bound on it. A bound is valid when it does not exceed the ground-truth
value. Aggregates average valid bounds only.

Seeds are derived from the master seed by position, never by execution
order, so results do not depend on the number of workers:

* ground truth: ``SeedSequence(seed, spawn_key=(0,))``
* dataset for ``(n, trial)``: ``spawn_key=(1, n, trial)``
* bootstrap resamples: ``spawn_key=(2, n, trial)``
* model rollouts: ``spawn_key=(3, n, trial)``
"""

from __future__ import annotations

import configparser
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .bootstrap import BootstrapConfig, lower_bound
from .doubly_robust import DoublyRobustEstimator
from .envs import (
    CliffWorldEnv,
    MountainCarEnv,
    cliff_policies,
    energy_pumping_policy,
    MICRO_MDPS,
    micro_mdp,
    monte_carlo_ground_truth,
    sample_dataset,
)
from .errors import ConfigError, HcopeError
from .importance import ImportanceEstimator
from .models import ModelBasedEstimator, TabularModel, value_iteration
from .policies import uniform_policy

ESTIMATORS = ("is", "pdis", "wis", "pdwis", "mb-lr", "mb-pr", "mb-tabular",
              "wdr-lr", "wdr-pr", "wdr-tabular", "dr")
ENVS = ("mountain-car-v0", "cliff-world-v0", "micro-mdp-v0")
DEFAULT_N = (2, 5, 10, 20, 50, 100, 200, 500)
DESK_TRIALS = {"mountain-car-v0": 100, "cliff-world-v0": 50, "micro-mdp-v0": 100}
PAPER_TRIALS = {"mountain-car-v0": 400, "cliff-world-v0": 100, "micro-mdp-v0": 400}
MODEL_OF = {"lr": "linear", "pr": "polynomial", "tabular": "tabular"}


@dataclass(frozen=True)
class SweepConfig:
    env: str = "mountain-car-v0"
    pi_e: str = ""
    pi_b: str = ""
    estimators: tuple = ("is", "pdwis", "mb-tabular", "wdr-tabular")
    n_values: tuple = DEFAULT_N
    trials: int = 0
    B: int = 2000
    delta: float = 0.05
    method: str = "percentile"
    ground_truth_rollouts: int = 100_000
    seed: int = 0
    workers: int = 1
    mb_rollouts: int = 1000
    rollouts_per_state: int = 50
    micro_index: int = 2
    full_scale: bool = False

    def __post_init__(self):
        if self.env not in ENVS:
            raise ConfigError(f"unknown env {self.env!r}; choose from {', '.join(ENVS)}")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimator(s) {', '.join(bad)}")
        if not self.estimators:
            raise ConfigError("no estimators configured")
        n = list(self.n_values)
        if not n or any(int(x) != x or x < 1 for x in n):
            raise ConfigError("n_values must be positive integers")
        if any(b <= a for a, b in zip(n, n[1:])):
            raise ConfigError("n_values must be strictly increasing")
        if self.trials < 0:
            raise ConfigError("trials must be non-negative (0 selects the desk-scale default)")
        if self.ground_truth_rollouts < 1 or self.mb_rollouts < 1 or self.rollouts_per_state < 1:
            raise ConfigError("rollout counts must be positive")
        BootstrapConfig(self.B, self.delta, self.method)
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        discrete = self.env != "cliff-world-v0"
        for e in self.estimators:
            kind = e.split("-")[-1]
            if discrete and kind in ("lr", "pr"):
                raise ConfigError(f"{e} needs a continuous environment, not {self.env}")
            if not discrete and kind == "tabular":
                raise ConfigError(f"{e} needs a discrete environment, not {self.env}")

    @property
    def m(self) -> int:
        if self.trials:
            return self.trials
        return (PAPER_TRIALS if self.full_scale else DESK_TRIALS)[self.env]


# -- config files ---------------------------------------------------------------

_LISTS = {"estimators": str, "n_values": int}


def parse_config(text: str, base: SweepConfig | None = None) -> SweepConfig:
    """Flat ``key = value`` lines; lists are comma-separated; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",))
    parser.optionxform = str  # keep key case so ``B`` stays ``B``
    try:
        parser.read_string("[sweep]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    known = {f.name: f for f in fields(SweepConfig)}
    values = {}
    for key, raw in parser["sweep"].items():
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            values[key] = _convert(key, raw.strip(), known[key].type)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return replace(base or SweepConfig(), **values)


def _convert(key, raw, typ):
    if key in _LISTS:
        return tuple(_LISTS[key](x.strip()) for x in raw.split(",") if x.strip())
    if typ in ("int", int):
        return int(raw)
    if typ in ("float", float):
        return float(raw)
    if typ in ("bool", bool):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(raw)
        return low in ("true", "1", "yes")
    return raw


def load_config(path) -> SweepConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def config_text(cfg: SweepConfig) -> str:
    out = []
    for f in fields(SweepConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(map(str, v))
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


# -- registry -------------------------------------------------------------------

@dataclass
class Problem:
    env: object
    pi_e: object
    pi_b: object


def resolve_env(env_id: str, micro_index: int = 2):
    """Map a dataset's env id (``micro-mdp-<k>`` included) to a registry id and micro index."""
    if env_id.startswith("micro-mdp-") and env_id[len("micro-mdp-"):].isdigit():
        k = int(env_id[len("micro-mdp-"):])
        if k >= len(MICRO_MDPS):
            raise ConfigError(f"no micro-MDP with index {k}")
        return "micro-mdp-v0", k
    return env_id, micro_index


def make_problem(env_id: str, pi_e: str = "", pi_b: str = "", micro_index: int = 2) -> Problem:
    """Environment and the two policies, looked up by name ("" means the default)."""
    env_id, micro_index = resolve_env(env_id, micro_index)
    if env_id == "mountain-car-v0":
        env = MountainCarEnv()
        named = {"energy-pump": lambda: energy_pumping_policy(env), "uniform": lambda: uniform_policy(env.state_count, 3)}
        defaults = ("energy-pump", "uniform")
    elif env_id == "cliff-world-v0":
        env = CliffWorldEnv()
        e, b = cliff_policies(env.config)
        named = {"cliff-eval": lambda: e, "cliff-behavior": lambda: b}
        defaults = ("cliff-eval", "cliff-behavior")
    elif env_id == "micro-mdp-v0":
        env, e, b = micro_mdp(micro_index)
        named = {"micro-eval": lambda: e, "micro-behavior": lambda: b,
                 "uniform": lambda: uniform_policy(env.state_count, env.action_count)}
        defaults = ("micro-eval", "micro-behavior")
    else:
        raise ConfigError(f"unknown env {env_id!r}")
    pols = []
    for name, default in zip((pi_e, pi_b), defaults):
        name = name or default
        if name not in named:
            raise ConfigError(f"unknown policy {name!r} for {env_id}; choose from {', '.join(named)}")
        pols.append(named[name]())
    return Problem(env, *pols)


def policy_for(env_id: str, name: str, micro_index: int = 2):
    """A single named policy (either role) for ``env_id``."""
    try:
        return make_problem(env_id, pi_e=name, micro_index=micro_index).pi_e
    except ConfigError:
        return make_problem(env_id, pi_b=name, micro_index=micro_index).pi_b


def make_estimator(name: str, env, mb_rollouts: int = 1000, rollouts_per_state: int = 50, seed: int = 0):
    if name in ("is", "pdis", "wis", "pdwis"):
        return ImportanceEstimator(name, env.spec)
    discrete = getattr(env, "discrete", True)
    if name == "dr":
        return DoublyRobustEstimator(env, "tabular" if discrete else "linear", weighted=False,
                                     rollouts_per_state=rollouts_per_state, seed=seed)
    family, kind = name.split("-")
    model = MODEL_OF[kind]
    if (model == "tabular") != discrete:
        raise ConfigError(f"{name} does not apply to {env.env_id}")
    if family == "mb":
        return ModelBasedEstimator(env, model, rollouts=mb_rollouts, seed=seed)
    est = DoublyRobustEstimator(env, model, rollouts_per_state=rollouts_per_state, seed=seed)
    est.name = name
    return est


# -- ground truth ---------------------------------------------------------------

def ground_truth(problem: Problem, rollouts: int, seed: int):
    """``(V, stderr)``: exact DP for explicit tabular MDPs, else Monte Carlo."""
    env = problem.env
    if hasattr(env, "P"):
        S, A = env.state_count, env.action_count
        P = sp.csr_matrix(env.P.reshape(S * A, S))
        model = TabularModel(P, P, env.d0, np.ones((S, A), dtype=bool))
        vf = value_iteration(model, problem.pi_e, env.spec, env.reward_table())
        return float(env.d0 @ vf.v[0]), 0.0
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    return monte_carlo_ground_truth(env, problem.pi_e, rollouts, rng)


# -- sweep ----------------------------------------------------------------------

@dataclass(frozen=True)
class TrialRecord:
    estimator: str
    n: int
    trial: int
    status: str  # valid | invalid | failed
    lower_bound: float
    point_estimate: float
    error: str = ""


@dataclass(frozen=True)
class SweepRow:
    estimator: str
    n: int
    mean_bound: float
    ci_low: float
    ci_high: float
    error_rate: float
    valid: int
    invalid: int
    failed: int
    v_true: float
    v_stderr: float


CSV_COLUMNS = [f.name for f in fields(SweepRow)]


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    records: list = field(default_factory=list)
    v_true: float = float("nan")
    v_stderr: float = float("nan")
    config: SweepConfig | None = None

    def row(self, estimator, n) -> SweepRow:
        for r in self.rows:
            if r.estimator == estimator and r.n == n:
                return r
        raise KeyError((estimator, n))


def _seed(master: int, *key) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


def _trial(cfg: SweepConfig, problem: Problem, estimators, n: int, trial: int, v_true: float):
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, n, trial)))
    ds = sample_dataset(problem.env, problem.pi_b, n, rng)
    bcfg = BootstrapConfig(cfg.B, cfg.delta, cfg.method, seed=_seed(cfg.seed, 2, n, trial))
    out = []
    for name, est in estimators:
        if hasattr(est, "seed"):
            est.seed = _seed(cfg.seed, 3, n, trial)
        try:
            rep = lower_bound(ds, est, problem.pi_e, problem.pi_b, bcfg)
        except HcopeError as exc:
            out.append(TrialRecord(name, n, trial, "failed", math.nan, math.nan, str(exc)))
            continue
        status = "valid" if rep.lower_bound <= v_true else "invalid"
        out.append(TrialRecord(name, n, trial, status, rep.lower_bound, rep.point_estimate))
    return out


def aggregate(records, estimators, n_values, v_true, v_stderr):
    rows = []
    for name in estimators:
        for n in n_values:
            recs = [r for r in records if r.estimator == name and r.n == n]
            good = np.array([r.lower_bound for r in recs if r.status == "valid"])
            invalid = sum(r.status == "invalid" for r in recs)
            failed = sum(r.status == "failed" for r in recs)
            k = good.size
            mean = float(good.mean()) if k else math.nan
            if k >= 2:
                half = float(stats.t.ppf(0.975, k - 1) * good.std(ddof=1) / math.sqrt(k))
            else:
                half = math.nan
            rate = invalid / (k + invalid) if k + invalid else math.nan
            rows.append(SweepRow(name, n, mean, mean - half, mean + half, rate, k, invalid, failed,
                                 v_true, v_stderr))
    return rows


def run_sweep(cfg: SweepConfig, progress=None) -> SweepResult:
    """Run every ``(n, trial)`` job and aggregate per ``(estimator, n)``."""
    problem = make_problem(cfg.env, cfg.pi_e, cfg.pi_b, cfg.micro_index)
    v_true, v_se = ground_truth(problem, cfg.ground_truth_rollouts, cfg.seed)
    if v_se >= 0.01 * abs(v_true) and v_se > 0:
        raise ConfigError(f"ground-truth stderr {v_se:.4g} is not below 1% of |V| = {abs(v_true):.4g}; "
                          "increase ground_truth_rollouts")
    jobs = [(n, t) for n in cfg.n_values for t in range(cfg.m)]

    def run(job):
        n, t = job
        # estimator objects carry a per-trial seed, so each job gets its own
        ests = [(e, make_estimator(e, problem.env, cfg.mb_rollouts, cfg.rollouts_per_state)) for e in cfg.estimators]
        recs = _trial(cfg, problem, ests, n, t, v_true)
        if progress:
            progress(n, t)
        return recs

    if cfg.workers == 1:
        results = [run(j) for j in jobs]
    else:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(run, jobs))
    records = [r for rs in results for r in rs]
    rows = aggregate(records, cfg.estimators, cfg.n_values, v_true, v_se)
    return SweepResult(rows, records, v_true, v_se, cfg)


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(res: SweepResult, path) -> None:
    """One row per ``(estimator, n)`` with a fixed header; floats round-trip exactly."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in res.rows:
            w.writerow([_cell(getattr(r, c)) for c in CSV_COLUMNS])


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(SweepRow(
                rec["estimator"], int(rec["n"]),
                *(float(rec[c]) for c in CSV_COLUMNS[2:6]),
                *(int(rec[c]) for c in ("valid", "invalid", "failed")),
                float(rec["v_true"]), float(rec["v_stderr"]),
            ))
        return rows
