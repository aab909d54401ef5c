"""Weighted doubly robust (WDR) and doubly robust (DR) estimators.

Both subtract a control variate built from model value functions from a
per-decision importance sampling estimate::

    CV = sum_i sum_t gamma^t (w_t^i q(S_t^i, A_t^i) - w_{t-1}^i v(S_t^i))

WDR uses self-normalised weights ``w_t^i = rho_t^i / sum_j rho_t^j`` and
PDWIS; DR uses ``rho_t^i / n`` and PDIS. For the leading term each
trajectory's ``w_{-1}^i`` is ``1/n`` so the batch weights sum to one at every
step, including ``t = -1``.

The DR control variate has mean zero for any batch size. The WDR one is
zero when the batch is the whole trajectory distribution weighted by its
probabilities (``evaluate_weights``), where every self-normaliser equals
one; for a finite batch of i.i.d. trajectories the normalisers couple the
trajectories and its mean is small but generally not zero.

WDR is affine-equivariant and is evaluated in raw units. DR is evaluated on
the normalised scale like PDIS, with values shifted by the remaining reward
floor ``r_min * sum_{k < L-t} gamma^k`` before scaling.

Value functions are learned once from the whole dataset and reused for
every bootstrap resample.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .estimator import multiplicities
from .importance import compute_weights, normalized_weights, weighted_ratio
from .mdp import Dataset, MdpSpec, denormalize_return
from .models import (
    FEATURE_MAPS,
    learn_regression,
    learn_tabular,
    mc_value_functions,
    value_iteration,
)

MIXTURE_TOL = 1e-6


@dataclass(frozen=True)
class ControlVariateTrace:
    """Per ``(i, t)`` control variate entries and their sum."""

    entries: np.ndarray

    @property
    def total(self) -> float:
        return float(self.entries.sum())


def value_table(vf, ds: Dataset, horizon: int):
    """``q`` and ``v`` at every ``(i, t)``, zero after an episode has ended."""
    q, v = vf.at(ds, horizon)
    valid = ds.pack(horizon).valid
    return np.where(valid, q, 0.0), np.where(valid, v, 0.0)


def remaining_floor(spec: MdpSpec) -> np.ndarray:
    """``r_min * sum_{k=0}^{L-1-t} gamma^k`` for each t: the smallest value-to-go."""
    d = spec.discounts
    tail = np.cumsum(d[::-1])[::-1] / d
    return spec.r_min * tail


def check_mixture(vf, pi_e, tol: float = MIXTURE_TOL) -> None:
    """Warn if ``v != E_{pi_e} q`` on tabular value functions."""
    if hasattr(vf, "mixture_residual") and hasattr(pi_e, "probs"):
        resid = vf.mixture_residual(pi_e)
        if resid > tol:
            warnings.warn(f"value functions violate the mixture identity by {resid:.3g}; "
                          "the control variate may not have zero mean", RuntimeWarning, stacklevel=3)


def control_variate(ds, pi_e, pi_b, vf, spec: MdpSpec, weighted: bool = True) -> ControlVariateTrace:
    """Raw-unit control variate entries ``gamma^t (w_t q_t - w_{t-1} v_t)``."""
    n = len(ds)
    wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
    if weighted:
        w = normalized_weights(wm)
        prev = np.concatenate([np.full((n, 1), 1.0 / n), w[:, :-1]], axis=1)
    else:
        w = wm.rho / n
        prev = wm.shifted() / n
    q, v = value_table(vf, ds, spec.horizon)
    return ControlVariateTrace(spec.discounts * (w * q - prev * v))


def wdr_estimate(ds, pi_e, pi_b, vf, spec: MdpSpec) -> float:
    check_mixture(vf, pi_e)
    wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
    w = normalized_weights(wm)
    r = ds.pack(spec.horizon).rewards
    pdwis = float(np.sum(r * w, axis=0) @ spec.discounts)
    return pdwis - control_variate(ds, pi_e, pi_b, vf, spec).total


def dr_estimate(ds, pi_e, pi_b, vf, spec: MdpSpec) -> float:
    check_mixture(vf, pi_e)
    n = len(ds)
    wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
    packed = ds.pack(spec.horizon)
    r = spec.normalize_reward(packed.rewards)
    q, v = value_table(vf, ds, spec.horizon)
    floor = remaining_floor(spec)
    scale = spec.reward_range
    qn = np.where(packed.valid, (q - floor) / scale, 0.0)
    vn = np.where(packed.valid, (v - floor) / scale, 0.0)
    per_step = np.sum(wm.rho * (r - qn) + wm.shifted() * vn, axis=0) / n
    return float(denormalize_return(per_step @ spec.discounts / spec.discount_mass, spec))


# -- value functions for the estimator classes --------------------------------

def fit_value_functions(ds, pi_e, env, model_kind: str, rng=None, rollouts_per_state: int = 50):
    """Learn one model from all of ``ds`` and return its value functions for ``pi_e``."""
    if model_kind == "tabular":
        model = learn_tabular(ds, env.state_count, env.action_count)
        return value_iteration(model, pi_e, env.spec, env.reward_table())
    if model_kind not in FEATURE_MAPS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = learn_regression(ds, model_kind)
    return mc_value_functions(model, pi_e, env, ds, rollouts_per_state, rng)


class ZeroValues:
    """The all-zero model; reduces WDR to PDWIS and DR to PDIS."""

    provenance = "zero"

    def at(self, ds, horizon):
        z = np.zeros(ds.pack(horizon).valid.shape)
        return z, z


class DoublyRobustEstimator:
    """Bootstrap-ready WDR (``weighted=True``) or DR.

    ``value_functions`` may be given directly; otherwise a model of
    ``model_kind`` is fitted to the full dataset at ``prepare`` time.
    """

    def __init__(self, env, model_kind: str = "tabular", weighted: bool = True, value_functions=None,
                 rollouts_per_state: int = 50, seed: int = 0):
        self.env = env
        self.spec = env.spec
        self.model_kind = model_kind
        self.weighted = weighted
        self.value_functions = value_functions
        self.rollouts_per_state = rollouts_per_state
        self.seed = seed
        if weighted:
            self.name = f"wdr-{'tabular' if model_kind == 'tabular' else model_kind[:1] + 'r'}"
        else:
            self.name = "dr"

    def __call__(self, ds, pi_e, pi_b) -> float:
        vf = self.value_functions or fit_value_functions(
            ds, pi_e, self.env, self.model_kind, np.random.default_rng(self.seed), self.rollouts_per_state)
        fn = wdr_estimate if self.weighted else dr_estimate
        return fn(ds, pi_e, pi_b, vf, self.spec)

    def prepare(self, ds, pi_e, pi_b):
        vf = self.value_functions or fit_value_functions(
            ds, pi_e, self.env, self.model_kind, np.random.default_rng(self.seed), self.rollouts_per_state)
        check_mixture(vf, pi_e)
        return _PreparedDR(ds, pi_e, pi_b, vf, self.spec, self.weighted)


class _PreparedDR:
    def __init__(self, ds, pi_e, pi_b, vf, spec, weighted):
        self.n, self.spec, self.weighted = len(ds), spec, weighted
        wm = compute_weights(ds, pi_e, pi_b, spec.horizon)
        packed = ds.pack(spec.horizon)
        q, v = value_table(vf, ds, spec.horizon)
        rho, prev = wm.rho, wm.shifted()
        if weighted:
            self.a_num = rho * (packed.rewards - q)
            self.a_den = rho
            self.b_num = prev * v
            self.b_den = prev
        else:
            floor = remaining_floor(spec)
            qn = np.where(packed.valid, (q - floor) / spec.reward_range, 0.0)
            vn = np.where(packed.valid, (v - floor) / spec.reward_range, 0.0)
            self.num = rho * (spec.normalize_reward(packed.rewards) - qn) + prev * vn
        self.diagnostics = {"weight_variance": float(np.var(wm.final)),
                            "value_provenance": getattr(vf, "provenance", "")}

    def evaluate(self, indices):
        return self.evaluate_weights(multiplicities(indices, self.n))

    def evaluate_weights(self, M):
        """Estimates for batches given as non-negative per-trajectory weights (one row each)."""
        M = np.atleast_2d(np.asarray(M, dtype=float))
        spec = self.spec
        if not self.weighted:
            per_step = M @ self.num / M.sum(axis=1)[:, None]
            return denormalize_return(per_step @ spec.discounts / spec.discount_mass, spec)
        per_step = weighted_ratio(M @ self.a_num, M @ self.a_den) + weighted_ratio(M @ self.b_num, M @ self.b_den)
        return per_step @ spec.discounts
