"""Upper bounds on the bias of a model-based value estimate.

The exact bounds (``lemma1_bound``, ``theorem1_bound``, ``corollary1_bound``)
enumerate every length-L trajectory of a small tabular MDP. They are test
oracles and diagnostics, limited to ``(S*A)**L <= ENUMERATION_BUDGET``.

The data-driven ones (``surrogate_kl``, ``corollary2_bound``) replace the
KL divergence by a log-loss on observed transitions. For discrete models
the importance-weighted cross-entropy upper-bounds the KL sum in
expectation (an entropy term is dropped). For continuous models it only
matches up to an unknown constant, so those reports are tagged approximate.

All bounds use ``g_max = L * (r_max - r_min)``, the largest return once
rewards are shifted to start at zero. None of them is ever subtracted from
a lower bound: they are reported as diagnostics.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ModelError
from .importance import compute_weights
from .mdp import Dataset, MdpSpec
from .models import LinearGaussianModel, TabularModel

ENUMERATION_BUDGET = 10 ** 7
VARIANTS = ("lemma1", "theorem1", "corollary1", "corollary2-finite-sample")
SURROGATES = ("exact-kl", "cross-entropy", "nll")


@dataclass(frozen=True)
class BiasBoundReport:
    variant: str
    g_max: float
    kl_term: float
    bound: float
    surrogate: str = "exact-kl"
    alpha: float | None = None
    approximate: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k}: {v!r}\n" if isinstance(v, float) else f"{k}: {v}\n"
                       for k, v in self.to_dict().items())


def g_max(spec: MdpSpec) -> float:
    return spec.horizon * (spec.r_max - spec.r_min)


def pinsker_bound(kl: float, spec: MdpSpec) -> float:
    return 2.0 * math.sqrt(2.0) * g_max(spec) * math.sqrt(max(kl, 0.0))


# -- enumeration --------------------------------------------------------------

@dataclass(frozen=True)
class Paths:
    """All ``(S*A)**L`` state-action sequences, one per row."""

    states: np.ndarray
    actions: np.ndarray


def enumerate_paths(S: int, A: int, L: int) -> Paths:
    if (S * A) ** L > ENUMERATION_BUDGET:
        raise ConfigError(f"{(S * A) ** L} trajectories exceed the enumeration budget of {ENUMERATION_BUDGET}")
    grid = np.indices((S * A,) * L).reshape(L, -1).T
    return Paths(grid // A, grid % A)


def _as_tables(mdp):
    """``(P[S,A,S], d0[S])`` from a tabular environment or a learned model."""
    if isinstance(mdp, TabularModel):
        return mdp.dense_P(), np.asarray(mdp.d0)
    return np.asarray(mdp.P), np.asarray(mdp.d0)


def dynamics_log_prob(P, d0, paths: Paths) -> np.ndarray:
    """``log d0(s_0) + sum_t log P(s_{t+1} | s_t, a_t)`` for every path."""
    s, a = paths.states, paths.actions
    with np.errstate(divide="ignore"):
        lp = np.log(d0[s[:, 0]])
        if s.shape[1] > 1:
            lp = lp + np.log(P[s[:, :-1], a[:, :-1], s[:, 1:]]).sum(axis=1)
    return lp


def policy_log_prob(policy, paths: Paths) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(policy.probs[paths.states, paths.actions]).sum(axis=1)


def path_returns(r, paths: Paths, gamma: float) -> np.ndarray:
    L = paths.states.shape[1]
    return r[paths.states, paths.actions] @ (gamma ** np.arange(L))


def _kl_terms(p_log, q_log):
    """``p (log p - log q)`` per path; error where ``q = 0 < p``."""
    p = np.exp(p_log)
    live = p > 0
    if np.any(live & ~np.isfinite(q_log)):
        raise ModelError("infinite KL: the model gives zero probability to a possible trajectory")
    out = np.zeros_like(p)
    out[live] = p[live] * (p_log[live] - q_log[live])
    return out


@dataclass(frozen=True)
class TrajectoryDistributions:
    """Log-probabilities of every path under the true MDP and the model."""

    paths: Paths
    log_p: np.ndarray
    log_q: np.ndarray
    returns: np.ndarray


def trajectory_distributions(true_mdp, model, pi) -> TrajectoryDistributions:
    P, d0 = _as_tables(true_mdp)
    Ph, d0h = _as_tables(model)
    S, A = true_mdp.r.shape
    paths = enumerate_paths(S, A, true_mdp.spec.horizon)
    pol = policy_log_prob(pi, paths)
    return TrajectoryDistributions(
        paths,
        dynamics_log_prob(P, d0, paths) + pol,
        dynamics_log_prob(Ph, d0h, paths) + pol,
        path_returns(np.asarray(true_mdp.r), paths, true_mdp.spec.gamma),
    )


def trajectory_kl(true_mdp, model, pi) -> float:
    dist = trajectory_distributions(true_mdp, model, pi)
    return float(_kl_terms(dist.log_p, dist.log_q).sum())


def trajectory_tv(true_mdp, model, pi) -> float:
    dist = trajectory_distributions(true_mdp, model, pi)
    return float(0.5 * np.abs(np.exp(dist.log_p) - np.exp(dist.log_q)).sum())


def value_gap(true_mdp, model, pi) -> float:
    """``|V - V_hat|`` for ``pi`` by enumeration, rewards from the true MDP."""
    dist = trajectory_distributions(true_mdp, model, pi)
    return float(abs((np.exp(dist.log_p) - np.exp(dist.log_q)) @ dist.returns))


def lemma1_bound(true_mdp, model, pi) -> BiasBoundReport:
    kl = trajectory_kl(true_mdp, model, pi)
    return BiasBoundReport("lemma1", g_max(true_mdp.spec), kl, pinsker_bound(kl, true_mdp.spec))


def theorem1_expectation(true_mdp, model, pi_e, pi_b) -> float:
    """``E_{H ~ pi_b}[rho_L log(p_e(H) / p_hat_e(H))]`` by enumeration."""
    P, d0 = _as_tables(true_mdp)
    Ph, d0h = _as_tables(model)
    S, A = true_mdp.r.shape
    paths = enumerate_paths(S, A, true_mdp.spec.horizon)
    dyn = dynamics_log_prob(P, d0, paths)
    log_b = dyn + policy_log_prob(pi_b, paths)
    lpe = policy_log_prob(pi_e, paths)
    pb = np.exp(log_b)
    live = pb > 0
    if np.any(live & np.isfinite(lpe) & ~np.isfinite(policy_log_prob(pi_b, paths))):
        raise ConfigError("behavior policy does not cover the evaluation policy")
    rho = np.zeros_like(pb)
    rho[live] = np.exp(lpe[live] - policy_log_prob(pi_b, paths)[live])
    used = live & (rho > 0)
    log_ratio = np.zeros_like(pb)
    dyn_hat = dynamics_log_prob(Ph, d0h, paths)
    if np.any(used & ~np.isfinite(dyn_hat)):
        raise ModelError("infinite KL: the model gives zero probability to a possible trajectory")
    log_ratio[used] = dyn[used] - dyn_hat[used]
    return float(np.sum(pb[used] * rho[used] * log_ratio[used]))


def theorem1_bound(true_mdp, model, pi_e, pi_b) -> BiasBoundReport:
    kl = theorem1_expectation(true_mdp, model, pi_e, pi_b)
    return BiasBoundReport("theorem1", g_max(true_mdp.spec), kl, pinsker_bound(kl, true_mdp.spec))


def kl_rows(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise ``KL(p || q)`` over the last axis; ``inf`` where support fails."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def corollary1_expectation(true_mdp, model, pi_e, pi_b) -> float:
    """``eps0 + sum_{t=0}^{L-2} E_{pi_b}[rho_t eps(S_t, A_t)]``.

    ``rho_t`` includes the action at step ``t``; the last step has no
    successor, so it contributes no transition term.
    """
    P, d0 = _as_tables(true_mdp)
    Ph, d0h = _as_tables(model)
    S, A = true_mdp.r.shape
    L = true_mdp.spec.horizon
    eps0 = float(kl_rows(d0, d0h))
    eps = kl_rows(P, Ph)
    # forward pass: m[s, a] = E_{pi_b}[rho_t 1{S_t = s, A_t = a}] = P_{pi_e}(S_t = s, A_t = a)
    ratio = np.divide(pi_e.probs, pi_b.probs, out=np.zeros_like(pi_e.probs), where=pi_b.probs > 0)
    if np.any((pi_b.probs == 0) & (pi_e.probs > 0)):
        raise ConfigError("behavior policy does not cover the evaluation policy")
    state = d0.copy()
    total = eps0
    for _ in range(L - 1):
        m = state[:, None] * pi_b.probs * ratio
        hit = m > 0
        if np.any(hit & ~np.isfinite(eps)):
            raise ModelError("infinite KL: the model gives zero probability to a possible transition")
        total += float(np.sum(m[hit] * eps[hit]))
        state = np.einsum("sa,sat->t", m, P)
    return total


def corollary1_bound(true_mdp, model, pi_e, pi_b) -> BiasBoundReport:
    kl = corollary1_expectation(true_mdp, model, pi_e, pi_b)
    return BiasBoundReport("corollary1", g_max(true_mdp.spec), kl, pinsker_bound(kl, true_mdp.spec))


# -- data-driven surrogates -----------------------------------------------------

def _gaussian_logpdf(x, mean, cov):
    """Log density on the support of a possibly singular Gaussian; ``-inf`` off it."""
    w, V = np.linalg.eigh(np.atleast_2d(cov))
    keep = w > 1e-12 * max(w.max(initial=0.0), 1e-300)
    z = (np.asarray(x, dtype=float) - mean) @ V
    k = int(keep.sum())
    quad = np.sum(z[..., keep] ** 2 / w[keep], axis=-1)
    out = -0.5 * (k * np.log(2 * np.pi) + np.log(w[keep]).sum() + quad)
    off = np.sum(z[..., ~keep] ** 2, axis=-1) > 1e-18
    return np.where(off, -np.inf, out)


def log_losses(ds: Dataset, model):
    """Per-trajectory ``-log d0_hat(s_0)`` and per-step ``-log P_hat(s_{t+1} | s_t, a_t)``.

    Step losses are laid out ``(n, L)`` with the last recorded step (which
    has no successor) and padding set to 0.
    """
    n = len(ds)
    L = max(len(t) for t in ds)
    init = np.empty(n)
    steps = np.zeros((n, L))
    if isinstance(model, TabularModel):
        init_lp = model.log_initial(np.array([int(t.states[0]) for t in ds]))
    elif isinstance(model, LinearGaussianModel):
        mu, cov = model.initial_density()
        init_lp = _gaussian_logpdf(np.array([t.states[0] for t in ds], dtype=float), mu, cov)
    else:
        raise ConfigError(f"unsupported model type {type(model).__name__}")
    init[:] = -init_lp
    for i, t in enumerate(ds):
        if len(t) < 2:
            continue
        lp = model.log_transition(t.states[:-1], t.actions[:-1], t.states[1:])
        steps[i, : len(t) - 1] = -np.asarray(lp, dtype=float)
    bad = np.argwhere(~np.isfinite(steps))
    if bad.size:
        i, k = bad[0]
        raise ModelError(f"zero model probability at trajectory {i}, step {k}")
    bad = np.flatnonzero(~np.isfinite(init))
    if bad.size:
        raise ModelError(f"zero model probability for the initial state of trajectory {bad[0]}")
    return init, steps


def surrogate_kl(ds: Dataset, model, pi_e, pi_b, kind: str = "cross-entropy", weights=None) -> float:
    """Importance-weighted log-loss standing in for the Corollary-1 KL sum.

    ``mean_i [-log d0_hat(s_0^i) + sum_t rho_t^i * -log P_hat(s_{t+1}^i | s_t^i, a_t^i)]``

    ``weights`` optionally replaces the uniform ``1/n`` per trajectory (for
    instance with exact trajectory probabilities, giving the expectation).
    For discrete models ``cross-entropy`` and ``nll`` coincide; continuous
    models only support ``nll`` (a density, not a probability).
    """
    if kind not in ("cross-entropy", "nll"):
        raise ConfigError(f"unknown surrogate {kind!r}")
    if kind == "cross-entropy" and not isinstance(model, TabularModel):
        raise ConfigError("cross-entropy surrogate needs a discrete model; use nll")
    if len(ds) == 0:
        raise ConfigError("surrogate needs a non-empty dataset")
    init, steps = log_losses(ds, model)
    L = steps.shape[1]
    rho = compute_weights(ds, pi_e, pi_b, L).rho
    per = init + np.sum(rho * steps, axis=1)
    w = np.full(len(ds), 1.0 / len(ds)) if weights is None else np.asarray(weights, dtype=float)
    return float(w @ per)


def surrogate_bound(ds, model, pi_e, pi_b, spec: MdpSpec, kind: str = "cross-entropy") -> BiasBoundReport:
    kl = surrogate_kl(ds, model, pi_e, pi_b, kind)
    return BiasBoundReport("corollary1", g_max(spec), kl, pinsker_bound(kl, spec), surrogate=kind,
                           approximate=not isinstance(model, TabularModel))


def corollary2_bound(ds: Dataset, model, alpha: float, spec: MdpSpec) -> BiasBoundReport:
    """Finite-sample bound, exactly as displayed:

    ``2 g_max sqrt(2 sqrt(ln(1/alpha) / (2m)) - (1/m) sum_h (log d0_hat(s_0) + sum_t log P_hat))``

    It carries no importance weights. A negative radicand (possible with
    densities) is clamped to 0 with a warning.
    """
    if not 0 < alpha <= 1:
        raise ConfigError("alpha must lie in (0, 1]")
    m = len(ds)
    if m < 1:
        raise ConfigError("corollary 2 needs at least one trajectory")
    init, steps = log_losses(ds, model)
    nll = float(np.mean(init + steps.sum(axis=1)))
    radicand = 2.0 * math.sqrt(math.log(1.0 / alpha) / (2.0 * m)) + nll
    if radicand < 0:
        warnings.warn(f"corollary 2 radicand {radicand:.4g} is negative; clamped to 0",
                      RuntimeWarning, stacklevel=2)
        radicand = 0.0
    gm = g_max(spec)
    return BiasBoundReport("corollary2-finite-sample", gm, nll, 2.0 * gm * math.sqrt(radicand),
                           surrogate="nll", alpha=alpha, approximate=not isinstance(model, TabularModel))
