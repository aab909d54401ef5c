"""Bootstrap lower bounds on a policy's value.

Resample ``j`` draws its trajectory indices from its own generator, seeded
by ``SeedSequence(seed, spawn_key=(j,))``. Resamples are evaluated in
fixed-size chunks, so the estimates, and therefore the bound, do not
depend on how many worker threads run the chunks.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ConfigError, NumericFailure
from .estimator import FunctionEstimator

METHODS = ("percentile", "bca")
CHUNK = 50


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 2000
    delta: float = 0.05
    method: str = "percentile"
    seed: int = 0
    workers: int = 1
    keep_estimates: bool = False
    max_failure_rate: float = 0.01

    def __post_init__(self):
        if int(self.B) != self.B or self.B < 1:
            raise ConfigError("B must be a positive integer")
        if not 0 < self.delta < 1:
            raise ConfigError("delta must lie in (0, 1)")
        if math.floor(self.delta * self.B) < 1:
            raise ConfigError(f"floor(delta * B) = 0 for delta={self.delta}, B={self.B}; increase B")
        if self.method not in METHODS:
            raise ConfigError(f"unknown bootstrap method {self.method!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def order_index(self) -> int:
        """1-based position of the bound in the ascending resample estimates."""
        return math.floor(self.delta * self.B)


@dataclass
class BoundReport:
    estimator: str
    point_estimate: float
    lower_bound: float
    delta: float
    B: int
    method: str
    seed: int
    order_index: int
    failures: int = 0
    n: int = 0
    estimates: list | None = None
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)

    def to_text(self) -> str:
        """``key: value`` lines, one per field, stable order."""
        lines = []
        for k, v in self.to_dict().items():
            if k == "estimates" and v is None:
                continue
            if isinstance(v, float):
                v = repr(v)
            elif isinstance(v, (dict, list)):
                v = json.dumps(v, sort_keys=True, default=_jsonable)
            lines.append(f"{k}: {v}")
        return "\n".join(lines) + "\n"


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(type(x))


def resample_indices(n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. uniform draws from ``0 .. n-1``."""
    if n < 1:
        raise ValueError("cannot resample an empty dataset")
    return rng.integers(0, n, size=n)


def resample_rng(seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(j,)))


def resample_matrix(n: int, start: int, stop: int, seed: int) -> np.ndarray:
    return np.stack([resample_indices(n, resample_rng(seed, j)) for j in range(start, stop)])


def _prepare(estimator, ds, pi_e, pi_b):
    if not hasattr(estimator, "prepare"):
        estimator = FunctionEstimator(estimator)
    return getattr(estimator, "name", "estimator"), estimator.prepare(ds, pi_e, pi_b)


def bootstrap_estimates(prepared, n: int, cfg: BootstrapConfig) -> np.ndarray:
    """All ``B`` resample estimates in resample order; NaN marks a failure."""
    chunks = [(lo, min(lo + CHUNK, cfg.B)) for lo in range(0, cfg.B, CHUNK)]

    def run(bounds):
        lo, hi = bounds
        with np.errstate(all="ignore"):
            return np.asarray(prepared.evaluate(resample_matrix(n, lo, hi, cfg.seed)), dtype=float)

    if cfg.workers == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(run, chunks))
    return np.concatenate(parts)


def order_statistic(sorted_values: np.ndarray, level: float) -> tuple[float, int]:
    """``floor(level * B)``-th smallest value (1-based, at least the first)."""
    l = max(1, math.floor(level * len(sorted_values)))
    return float(sorted_values[l - 1]), l


def _point(prepared, n):
    with np.errstate(all="ignore"):
        value = float(prepared.evaluate(np.arange(n)[None])[0])
    if not np.isfinite(value):
        raise NumericFailure("estimator undefined on the full dataset")
    return value


def _collect(name, prepared, ds, cfg):
    n = len(ds)
    if n < 2:
        raise ConfigError("bootstrap needs at least 2 trajectories")
    point = _point(prepared, n)
    est = bootstrap_estimates(prepared, n, cfg)
    failed = ~np.isfinite(est)
    if failed.sum() > cfg.max_failure_rate * cfg.B:
        raise NumericFailure(
            f"{name}: estimator failed on {int(failed.sum())} of {cfg.B} resamples "
            "(evaluation policy likely unsupported by the data)")
    good = est[~failed]
    # stable sort: equal values keep resample order
    good = good[np.argsort(good, kind="stable")]
    return point, good, int(failed.sum())


def _report(name, prepared, ds, cfg, point, sorted_est, failures, bound, l, method, warns):
    diag = dict(getattr(prepared, "diagnostics", {}) or {})
    return BoundReport(
        estimator=name,
        point_estimate=point,
        lower_bound=bound,
        delta=cfg.delta,
        B=cfg.B,
        method=method,
        seed=cfg.seed,
        order_index=l,
        failures=failures,
        n=len(ds),
        estimates=sorted_est.tolist() if cfg.keep_estimates else None,
        diagnostics=diag,
        warnings=warns,
    )


def percentile_lower_bound(ds, estimator, pi_e, pi_b, cfg: BootstrapConfig | None = None) -> BoundReport:
    """The ``floor(delta * B)``-th smallest of ``B`` resample estimates."""
    cfg = cfg or BootstrapConfig()
    name, prepared = _prepare(estimator, ds, pi_e, pi_b)
    point, est, failures = _collect(name, prepared, ds, cfg)
    bound, l = order_statistic(est, cfg.delta)
    return _report(name, prepared, ds, cfg, point, est, failures, bound, l, "percentile", [])


def bca_level(point: float, estimates: np.ndarray, jackknife: np.ndarray, delta: float):
    """Adjusted lower percentile level for BCa, or ``(None, reason)`` when undefined.

    ``z0`` counts ties at the point estimate as half below; the acceleration
    is the jackknife skewness ``sum(d**3) / (6 * sum(d**2)**1.5)`` with
    ``d = mean(jackknife) - jackknife``.
    """
    est = np.asarray(estimates, dtype=float)
    below = (np.sum(est < point) + np.sum(est <= point)) / (2.0 * est.size)
    if below <= 0 or below >= 1:
        return None, "bias correction is infinite (all resamples on one side of the estimate)"
    z0 = norm.ppf(below)
    jk = np.asarray(jackknife, dtype=float)
    d = jk.mean() - jk
    ss = np.sum(d * d)
    if jk.size < 3 or ss <= 0 or not np.isfinite(ss):
        return None, "jackknife is degenerate"
    a = np.sum(d ** 3) / (6.0 * ss ** 1.5)
    zd = norm.ppf(delta)
    denom = 1.0 - a * (z0 + zd)
    if denom <= 0:
        return None, "acceleration too large for the requested level"
    return float(norm.cdf(z0 + (z0 + zd) / denom)), None


def jackknife_estimates(prepared, n: int) -> np.ndarray:
    rows = np.array([np.delete(np.arange(n), i) for i in range(n)])
    out = []
    for lo in range(0, n, CHUNK):
        with np.errstate(all="ignore"):
            out.append(np.asarray(prepared.evaluate(rows[lo: lo + CHUNK]), dtype=float))
    return np.concatenate(out)


def bca_lower_bound(ds, estimator, pi_e, pi_b, cfg: BootstrapConfig | None = None) -> BoundReport:
    """BCa bound; falls back to the percentile bound (with a warning) when undefined."""
    cfg = cfg or BootstrapConfig(method="bca")
    name, prepared = _prepare(estimator, ds, pi_e, pi_b)
    point, est, failures = _collect(name, prepared, ds, cfg)
    n = len(ds)
    reason = "fewer than 3 trajectories" if n < 3 else None
    level = None
    if reason is None:
        jk = jackknife_estimates(prepared, n)
        if not np.all(np.isfinite(jk)):
            reason = "estimator undefined on a leave-one-out dataset"
        else:
            level, reason = bca_level(point, est, jk, cfg.delta)
    if level is None:
        msg = f"BCa unavailable ({reason}); using the percentile bound"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        bound, l = order_statistic(est, cfg.delta)
        return _report(name, prepared, ds, cfg, point, est, failures, bound, l, "percentile", [msg])
    bound, l = order_statistic(est, level)
    report = _report(name, prepared, ds, cfg, point, est, failures, bound, l, "bca", [])
    report.diagnostics["bca_level"] = level
    return report


def lower_bound(ds, estimator, pi_e, pi_b, cfg: BootstrapConfig | None = None) -> BoundReport:
    cfg = cfg or BootstrapConfig()
    fn = bca_lower_bound if cfg.method == "bca" else percentile_lower_bound
    return fn(ds, estimator, pi_e, pi_b, cfg)
