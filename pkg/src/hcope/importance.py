"""Importance weights and the IS, PDIS, WIS and PDWIS estimators.

IS works on returns normalised to [0, 1] and PDIS on per-step rewards
normalised to [0, 1]; both are mapped back to the raw return scale. The
self-normalised WIS and PDWIS are affine-equivariant (their weights sum to
one per column), so they are evaluated directly on raw returns and rewards,
which gives the same value without a rounding round trip. Steps after an
early termination keep the trajectory's last weight and earn a raw reward
of 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SupportViolation, ZeroWeightError
from .estimator import FunctionEstimator, multiplicities
from .mdp import Dataset, MdpSpec, denormalize_return, normalize_return, trajectory_return

KINDS = ("is", "pdis", "wis", "pdwis")


@dataclass(frozen=True)
class WeightMatrix:
    """``rho[i, t]``: product of ratios pi_e/pi_b over steps 0..t of trajectory i."""

    rho: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.rho[:, -1]

    def shifted(self) -> np.ndarray:
        """Weights one step earlier, with an implicit leading column of ones."""
        return np.concatenate([np.ones((self.rho.shape[0], 1)), self.rho[:, :-1]], axis=1)


def log_ratios(ds: Dataset, pi_e, pi_b, horizon: int | None = None) -> np.ndarray:
    L = horizon or max(len(t) for t in ds)
    packed = ds.pack(L)
    with np.errstate(divide="ignore", invalid="ignore"):
        lp_b = np.asarray(pi_b.log_probs(packed.states, packed.actions), dtype=float)
        lp_e = np.asarray(pi_e.log_probs(packed.states, packed.actions), dtype=float)
    bad = packed.valid & ~np.isfinite(lp_b)
    if bad.any():
        i, t = np.argwhere(bad)[0]
        raise SupportViolation(
            f"behavior support violation at trajectory {i}, step {t}", int(i), int(t)
        )
    with np.errstate(invalid="ignore"):
        lr = np.where(packed.valid, lp_e - lp_b, 0.0)
    return lr


def compute_weights(ds: Dataset, pi_e, pi_b, horizon: int | None = None) -> WeightMatrix:
    # accumulate in log space; a single exp per entry avoids underflow at L=100
    lr = log_ratios(ds, pi_e, pi_b, horizon)
    rho = np.exp(np.cumsum(lr, axis=1))
    rho.setflags(write=False)
    return WeightMatrix(rho)


def normalized_weights(wm: WeightMatrix) -> np.ndarray:
    totals = wm.rho.sum(axis=0)
    zero = np.flatnonzero(totals <= 0)
    if zero.size:
        raise ZeroWeightError(int(zero[0]))
    return wm.rho / totals


def normalized_rewards(ds: Dataset, spec: MdpSpec) -> np.ndarray:
    """Per-step rewards on [0, 1], padded to the horizon with the image of 0."""
    packed = ds.pack(spec.horizon)
    return spec.normalize_reward(packed.rewards)


def normalized_returns(ds: Dataset, spec: MdpSpec) -> np.ndarray:
    packed = ds.pack(spec.horizon)
    return normalize_return(packed.rewards @ spec.discounts, spec)


def is_estimate(ds, pi_e, pi_b, spec: MdpSpec) -> float:
    wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
    g = normalized_returns(ds, spec)
    return float(denormalize_return(np.mean(g * wm.final), spec))


def pdis_estimate(ds, pi_e, pi_b, spec: MdpSpec) -> float:
    wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
    r = normalized_rewards(ds, spec)
    per_step = np.mean(r * wm.rho, axis=0)
    return float(denormalize_return(per_step @ spec.discounts / spec.discount_mass, spec))


def raw_returns(ds: Dataset, spec: MdpSpec) -> np.ndarray:
    return np.array([trajectory_return(t, spec.gamma) for t in ds])


def wis_estimate(ds, pi_e, pi_b, spec: MdpSpec) -> float:
    wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
    w = normalized_weights(WeightMatrix(wm.final[:, None]))[:, 0]
    return float(raw_returns(ds, spec) @ w)


def pdwis_estimate(ds, pi_e, pi_b, spec: MdpSpec) -> float:
    wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
    w = normalized_weights(wm)
    per_step = np.sum(ds.pack(spec.horizon).rewards * w, axis=0)
    return float(per_step @ spec.discounts)


ESTIMATORS = {
    "is": is_estimate,
    "pdis": pdis_estimate,
    "wis": wis_estimate,
    "pdwis": pdwis_estimate,
}


def weighted_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    """``num / den`` with NaN wherever the denominator vanishes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


class ImportanceEstimator:
    """Bootstrap-ready IS-family estimator.

    Weights and normalised rewards are computed once; a resample only changes
    how many times each trajectory is counted. ``reuse_weights=False``
    recomputes everything on each materialised resample instead (a slow
    path kept for sensitivity checks; the values agree).
    """

    def __init__(self, kind: str, spec: MdpSpec, reuse_weights: bool = True):
        if kind not in KINDS:
            raise ValueError(f"unknown importance estimator {kind!r}")
        self.kind = kind
        self.spec = spec
        self.reuse_weights = reuse_weights
        self.name = kind

    def __call__(self, ds, pi_e, pi_b) -> float:
        return ESTIMATORS[self.kind](ds, pi_e, pi_b, self.spec)

    def prepare(self, ds, pi_e, pi_b):
        if not self.reuse_weights:
            return FunctionEstimator(self, self.name).prepare(ds, pi_e, pi_b)
        return _PreparedImportance(self.kind, self.spec, ds, pi_e, pi_b)


class _PreparedImportance:
    def __init__(self, kind, spec, ds, pi_e, pi_b):
        self.kind, self.spec, self.n = kind, spec, len(ds)
        wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
        self.rho = wm.rho
        if kind == "is":
            self.num = normalized_returns(ds, spec) * wm.final
        elif kind == "wis":
            self.num = raw_returns(ds, spec) * wm.final
            self.den = wm.final
        elif kind == "pdis":
            self.num = normalized_rewards(ds, spec) * wm.rho
        else:
            self.num = ds.pack(spec.horizon).rewards * wm.rho
            self.den = wm.rho
        self.diagnostics = {"weight_variance": float(np.var(wm.final))}

    def evaluate(self, indices):
        return self.evaluate_weights(multiplicities(indices, self.n))

    def evaluate_weights(self, M):
        """Estimates for batches given as non-negative per-trajectory weights (one row each)."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        m = M.sum(axis=1)
        spec = self.spec
        if self.kind == "is":
            return denormalize_return(M @ self.num / m, spec)
        if self.kind == "pdis":
            return denormalize_return((M @ self.num / m[:, None]) @ spec.discounts / spec.discount_mass, spec)
        if self.kind == "wis":
            return weighted_ratio(M @ self.num, M @ self.den)
        return weighted_ratio(M @ self.num, M @ self.den) @ spec.discounts
