"""Stochastic policies with exact action densities.

Every policy exposes a vectorised ``log_probs(states, actions)`` used by the
importance weights, plus scalar ``action_prob``/``sample_action`` helpers.
Random generators are always passed in by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError

LOG_2PI = np.log(2.0 * np.pi)


class TabularPolicy:
    """Action probabilities stored as a ``state_count x action_count`` table."""

    def __init__(self, probs, policy_id: str = "tabular"):
        probs = np.array(probs, dtype=float)
        if probs.ndim != 2:
            raise ValueError("tabular policy needs a 2-d probability table")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ValueError("policy probabilities must be finite and non-negative")
        totals = probs.sum(axis=1, keepdims=True)
        if np.any(totals <= 0):
            raise ValueError("every policy row needs positive mass")
        probs = probs / totals
        probs.setflags(write=False)
        self.probs = probs
        self.policy_id = policy_id
        self._cdf = np.cumsum(probs, axis=1)
        self._cdf[:, -1] = 1.0

    @property
    def state_count(self) -> int:
        return self.probs.shape[0]

    @property
    def action_count(self) -> int:
        return self.probs.shape[1]

    def _check(self, s, a=None):
        if not (0 <= int(s) < self.state_count):
            raise ValueError(f"state {s} outside [0, {self.state_count})")
        if a is not None and not (0 <= int(a) < self.action_count):
            raise ValueError(f"action {a} outside [0, {self.action_count})")

    def action_prob(self, s, a) -> float:
        if np.ndim(s) or np.ndim(a):
            raise ValueError("tabular policies take scalar state and action indices")
        self._check(s, a)
        return float(self.probs[int(s), int(a)])

    def probs_of(self, states, actions) -> np.ndarray:
        return self.probs[np.asarray(states), np.asarray(actions)]

    def log_probs(self, states, actions) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.probs_of(states, actions))

    def sample_action(self, s, rng: np.random.Generator) -> int:
        self._check(s)
        return int(np.searchsorted(self._cdf[int(s)], rng.random(), side="right"))

    def sample_actions(self, states, rng: np.random.Generator) -> np.ndarray:
        states = np.asarray(states)
        u = rng.random(states.shape)
        return (u[..., None] >= self._cdf[states]).sum(axis=-1).astype(np.int64)

    def to_dict(self) -> dict:
        return {"kind": "tabular", "policy_id": self.policy_id, "probs": self.probs.tolist()}


def uniform_policy(state_count: int, action_count: int, policy_id: str = "uniform") -> TabularPolicy:
    return TabularPolicy(np.ones((state_count, action_count)), policy_id)


class GaussianPolicy:
    """``N(mean_fn(s), covariance)`` over continuous actions.

    ``mean_fn`` must accept a batch of states with shape ``(..., d)`` and
    return means of shape ``(..., k)``.
    """

    def __init__(self, mean_fn: Callable, covariance, policy_id: str = "gaussian", mean_id: str = ""):
        cov = np.atleast_2d(np.array(covariance, dtype=float))
        if cov.shape[0] != cov.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            raise ValueError("covariance must be positive definite") from None
        cov.setflags(write=False)
        self.mean_fn = mean_fn
        self.covariance = cov
        self.policy_id = policy_id
        self.mean_id = mean_id or policy_id
        self._chol = chol
        self._prec_chol = np.linalg.inv(chol)
        self._log_norm = -0.5 * cov.shape[0] * LOG_2PI - np.log(np.diag(chol)).sum()

    @property
    def action_dim(self) -> int:
        return self.covariance.shape[0]

    def mean(self, states) -> np.ndarray:
        return np.asarray(self.mean_fn(np.asarray(states, dtype=float)), dtype=float)

    def log_probs(self, states, actions) -> np.ndarray:
        actions = np.asarray(actions, dtype=float)
        if actions.shape[-1] != self.action_dim:
            raise ValueError(f"action dimension {actions.shape[-1]} != {self.action_dim}")
        z = (actions - self.mean(states)) @ self._prec_chol.T
        return self._log_norm - 0.5 * np.sum(z * z, axis=-1)

    def action_prob(self, s, a) -> float:
        s = np.asarray(s, dtype=float)
        a = np.asarray(a, dtype=float)
        if a.ndim != 1 or a.shape[0] != self.action_dim:
            raise ValueError(f"action must be a vector of length {self.action_dim}")
        return float(np.exp(self.log_probs(s[None], a[None])[0]))

    def sample_actions(self, states, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(states)
        return mu + rng.standard_normal(mu.shape) @ self._chol.T

    def sample_action(self, s, rng: np.random.Generator) -> np.ndarray:
        return self.sample_actions(np.asarray(s, dtype=float)[None], rng)[0]

    def to_dict(self) -> dict:
        return {
            "kind": "gaussian",
            "policy_id": self.policy_id,
            "mean_id": self.mean_id,
            "covariance": self.covariance.tolist(),
        }


def policy_from_dict(d: dict, mean_fns: dict | None = None):
    """Rebuild a policy from :meth:`to_dict`; Gaussian means are looked up by id."""
    if d.get("kind") == "tabular":
        return TabularPolicy(d["probs"], d.get("policy_id", "tabular"))
    if d.get("kind") == "gaussian":
        fns = mean_fns or {}
        if d["mean_id"] not in fns:
            raise ConfigError(f"unknown mean policy {d['mean_id']!r}")
        return GaussianPolicy(fns[d["mean_id"]], d["covariance"], d.get("policy_id", "gaussian"), d["mean_id"])
    raise ConfigError(f"unknown policy kind {d.get('kind')!r}")


@dataclass(frozen=True)
class SupportReport:
    ok: bool
    trajectory: int | None = None
    step: int | None = None

    def __bool__(self):
        return self.ok


def support_check(pi_e, pi_b, ds) -> SupportReport:
    """Find the first observed step whose action the behavior policy cannot take.

    ``pi_e`` is accepted for symmetry with the estimators; only the behavior
    policy's mass on logged actions decides whether the data are usable.
    """
    for i, traj in enumerate(ds):
        with np.errstate(divide="ignore"):
            lp = np.asarray(pi_b.log_probs(traj.states, traj.actions))
        bad = np.flatnonzero(~np.isfinite(lp))
        if bad.size:
            return SupportReport(False, i, int(bad[0]))
    return SupportReport(True)
