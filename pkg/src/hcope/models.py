"""Learned dynamics models, their value functions, and the model-based estimator.

Tabular models count transitions; a state-action pair with no data moves
deterministically back to its own state. Continuous models regress the next
state on a feature map of ``(state, action)`` and add Gaussian residual
noise. The reward function is always taken from the environment.

For bootstrapping, :class:`ModelBasedEstimator` refits its model on every
resample. Both model kinds are refit from per-trajectory sufficient
statistics, so a whole block of resamples is solved in one vectorised pass.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ModelError
from .estimator import multiplicities
from .mdp import Dataset, MdpSpec

RIDGE = 1e-8
FEATURE_MAPS = ("linear", "polynomial")
MODEL_KINDS = ("tabular",) + FEATURE_MAPS


# -- tabular ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TabularModel:
    """Empirical transition model.

    ``counts`` and ``P`` are sparse ``(S*A) x S`` matrices; row ``s*A + a``
    holds the next-state distribution of ``(s, a)``.
    """

    counts: sp.csr_matrix
    P: sp.csr_matrix
    d0: np.ndarray
    visited: np.ndarray
    empty: bool = False

    @property
    def state_count(self) -> int:
        return self.visited.shape[0]

    @property
    def action_count(self) -> int:
        return self.visited.shape[1]

    def dense_P(self) -> np.ndarray:
        S, A = self.visited.shape
        return self.P.toarray().reshape(S, A, S)

    def prob(self, s, a, s_next) -> float:
        return float(self.P[int(s) * self.action_count + int(a), int(s_next)])

    def transition_probs(self, states, actions, next_states) -> np.ndarray:
        rows = np.asarray(states) * self.action_count + np.asarray(actions)
        return np.asarray(self.P[rows.ravel(), np.asarray(next_states).ravel()]).reshape(np.shape(rows))

    def log_transition(self, states, actions, next_states) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.transition_probs(states, actions, next_states))

    def log_initial(self, states) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.d0[np.asarray(states)])


def transitions(ds: Dataset):
    """Consecutive recorded ``(s, a, s')`` triples plus owning trajectory index."""
    owners, s, a, s2 = [], [], [], []
    for i, t in enumerate(ds):
        k = len(t) - 1
        if k <= 0:
            continue
        owners.append(np.full(k, i))
        s.append(t.states[:-1])
        a.append(t.actions[:-1])
        s2.append(t.states[1:])
    if not owners:
        return (np.zeros(0, dtype=np.int64),) + (None,) * 3
    return np.concatenate(owners), np.concatenate(s), np.concatenate(a), np.concatenate(s2)


def learn_tabular(ds: Dataset, state_count: int, action_count: int) -> TabularModel:
    S, A = state_count, action_count
    owners, s, a, s2 = transitions(ds)
    if owners.size:
        counts = sp.csr_matrix((np.ones(owners.size), (s * A + a, s2)), shape=(S * A, S))
        counts.sum_duplicates()
    else:
        counts = sp.csr_matrix((S * A, S))
    totals = np.asarray(counts.sum(axis=1)).ravel()
    visited = totals > 0
    scale = sp.diags(np.where(visited, 1.0 / np.where(visited, totals, 1.0), 0.0))
    rows = np.flatnonzero(~visited)
    loops = sp.csr_matrix((np.ones(rows.size), (rows, rows // A)), shape=(S * A, S))
    P = (scale @ counts + loops).tocsr()
    if len(ds):
        d0 = np.bincount([int(t.states[0]) for t in ds], minlength=S) / len(ds)
    else:
        d0 = np.full(S, 1.0 / S)
    d0.setflags(write=False)
    return TabularModel(counts, P, d0, visited.reshape(S, A), empty=len(ds) == 0)


def learn_reward_table(ds: Dataset, fallback: np.ndarray) -> np.ndarray:
    """Mean observed reward per state-action pair, ``fallback`` where unseen.

    Off by default everywhere: the estimators use the environment's rewards.
    """
    S, A = fallback.shape
    total = np.zeros(S * A)
    count = np.zeros(S * A)
    for t in ds:
        idx = t.states * A + t.actions
        np.add.at(total, idx, t.rewards)
        np.add.at(count, idx, 1)
    out = fallback.astype(float).ravel().copy()
    seen = count > 0
    out[seen] = total[seen] / count[seen]
    return out.reshape(S, A)


@dataclass(frozen=True, eq=False)
class TabularValueFunctions:
    """Finite-horizon values: ``q[t, s, a]`` and ``v[t, s]`` with ``L - t`` steps to go."""

    q: np.ndarray
    v: np.ndarray
    provenance: str = "value-iteration"

    def at(self, ds: Dataset, horizon: int):
        """Values at every ``(i, t)`` of the dataset; padded steps use the last state."""
        packed = ds.pack(horizon)
        t = np.broadcast_to(np.arange(horizon), packed.states.shape)
        return self.q[t, packed.states, packed.actions], self.v[t, packed.states]

    def mixture_residual(self, policy) -> float:
        mixed = np.einsum("tsa,sa->ts", self.q, policy.probs)
        return float(np.max(np.abs(mixed - self.v)))


def value_iteration(model: TabularModel, pi_e, spec: MdpSpec, rewards: np.ndarray) -> TabularValueFunctions:
    """Exact backward induction over the model for ``spec.horizon`` steps."""
    S, A = model.visited.shape
    L = spec.horizon
    R = np.asarray(rewards, dtype=float)
    if R.shape != (S, A):
        raise ValueError(f"reward table must have shape {(S, A)}")
    q = np.empty((L, S, A))
    v = np.empty((L, S))
    nxt = np.zeros(S)
    for t in range(L - 1, -1, -1):
        q[t] = R + spec.gamma * (model.P @ nxt).reshape(S, A)
        v[t] = np.einsum("sa,sa->s", pi_e.probs, q[t])
        nxt = v[t]
    return TabularValueFunctions(q, v)


# -- regression ---------------------------------------------------------------

def features(states, actions, feature_map: str) -> np.ndarray:
    """Design rows for ``(state, action)``.

    ``linear``: 1, x, a. ``polynomial``: 1, x**2, x**3, a, i.e. every state
    component enters only through its square and cube.
    """
    s = np.asarray(states, dtype=float)
    a = np.asarray(actions, dtype=float)
    ones = np.ones(s.shape[:-1] + (1,))
    if feature_map == "linear":
        return np.concatenate([ones, s, a], axis=-1)
    if feature_map == "polynomial":
        return np.concatenate([ones, s * s, s * s * s, a], axis=-1)
    raise ValueError(f"unknown feature map {feature_map!r}")


def feature_dim(state_dim: int, action_dim: int, feature_map: str) -> int:
    return 1 + state_dim * (1 if feature_map == "linear" else 2) + action_dim


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    """``s' ~ N(W^T phi(s, a), Q)`` plus the observed initial states."""

    W: np.ndarray
    Q: np.ndarray
    feature_map: str
    initial_states: np.ndarray
    mse: float = 0.0

    def __post_init__(self):
        Q = 0.5 * (self.Q + self.Q.T)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "_chol", _psd_factor(Q))

    @property
    def state_dim(self) -> int:
        return self.W.shape[1]

    def mean(self, states, actions) -> np.ndarray:
        return features(states, actions, self.feature_map) @ self.W

    def sample_next(self, states, actions, rng) -> np.ndarray:
        mu = self.mean(states, actions)
        return mu + rng.standard_normal(mu.shape) @ self._chol.T

    def log_transition(self, states, actions, next_states) -> np.ndarray:
        """Gaussian log density of observed next states (``-inf`` off a singular support)."""
        resid = np.asarray(next_states, dtype=float) - self.mean(states, actions)
        d = self.state_dim
        w, V = np.linalg.eigh(self.Q)
        keep = w > 1e-12 * max(w.max(), 1e-300)
        z = resid @ V
        quad = np.sum(z[..., keep] ** 2 / w[keep], axis=-1)
        off = np.sum(z[..., ~keep] ** 2, axis=-1) > 1e-18
        logdet = np.log(w[keep]).sum()
        k = int(keep.sum())
        out = -0.5 * (k * np.log(2 * np.pi) + logdet + quad)
        if k < d:
            out = np.where(off, -np.inf, out)
        return out

    def initial_density(self):
        """Gaussian fit to the observed initial states (used by the NLL surrogate)."""
        X = self.initial_states
        mu = X.mean(axis=0)
        C = np.cov(X.T, bias=True) if len(X) > 1 else np.zeros((X.shape[1], X.shape[1]))
        return mu, np.atleast_2d(C)


def _psd_factor(Q: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(Q)
    return V * np.sqrt(np.clip(w, 0.0, None))


def regression_data(ds: Dataset, feature_map: str):
    owners, s, a, s2 = transitions(ds)
    if not owners.size:
        return owners, None, None
    return owners, features(s, a, feature_map), np.asarray(s2, dtype=float)


def learn_regression(ds: Dataset, feature_map: str, ridge: float = RIDGE) -> LinearGaussianModel:
    if feature_map not in FEATURE_MAPS:
        raise ValueError(f"unknown feature map {feature_map!r}")
    owners, X, Y = regression_data(ds, feature_map)
    if len(ds) == 0 or not len(ds[0].states.shape) == 2:
        raise ModelError("regression models need a continuous-state dataset")
    p = feature_dim(ds[0].states.shape[1], ds[0].actions.shape[1], feature_map)
    if owners.size < p:
        raise ModelError(f"underdetermined regression: {owners.size} transitions for {p} features")
    G = X.T @ X + ridge * np.eye(p)
    W = np.linalg.solve(G, X.T @ Y)
    resid = Y - X @ W
    Q = resid.T @ resid / len(Y)
    init = np.array([t.states[0] for t in ds], dtype=float)
    return LinearGaussianModel(W, Q, feature_map, init, float(np.mean(resid ** 2)))


def training_mse(model: LinearGaussianModel, ds: Dataset) -> float:
    _, X, Y = regression_data(ds, model.feature_map)
    return float(np.mean((Y - X @ model.W) ** 2))


# -- continuous rollouts ------------------------------------------------------

def _policy_actions(policy, states, noise, rng):
    if noise is not None and hasattr(policy, "_chol"):
        return policy.mean(states) + noise @ policy._chol.T
    return policy.sample_actions(states, rng)


def model_rollouts(model: LinearGaussianModel, env, policy, starts, rng, steps, first_actions=None):
    """Raw discounted returns of rollouts inside ``model`` from ``starts``.

    ``steps`` gives each rollout's remaining horizon (scalar or per start).
    ``env`` supplies the known reward and termination functions.
    """
    s = np.array(starts, dtype=float)
    N = s.shape[0]
    steps = np.broadcast_to(np.asarray(steps), (N,))
    gamma = env.spec.gamma
    alive = steps > 0
    g = np.zeros(N)
    disc = 1.0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(int(steps.max(initial=0))):
            alive &= k < steps
            if not alive.any():
                break
            if k == 0 and first_actions is not None:
                a = np.asarray(first_actions, dtype=float)
            else:
                a = policy.sample_actions(s, rng)
            g += np.where(alive, disc * env.reward(s, a), 0.0)
            alive &= ~env.terminal(s)
            s = model.sample_next(s, a, rng)
            disc *= gamma
    return g


@dataclass(frozen=True, eq=False)
class MonteCarloValueFunctions:
    """Rollout estimates of ``q`` and ``v`` at each ``(i, t)`` of a dataset."""

    q: np.ndarray
    v: np.ndarray
    q_stderr: np.ndarray
    v_stderr: np.ndarray
    provenance: str = "monte-carlo"

    def at(self, ds: Dataset, horizon: int):
        return self.q, self.v


def mc_value_functions(model: LinearGaussianModel, pi_e, env, ds: Dataset, rollouts_per_state: int,
                       rng) -> MonteCarloValueFunctions:
    """Estimate model values at the dataset's visited states.

    ``q(s_t, a_t)`` averages rollouts that start with the logged action; ``v(s_t)``
    averages rollouts whose first action is drawn from ``pi_e``, so
    ``v = E_{a ~ pi_e}[q(s, a)]`` holds in expectation.
    """
    L = env.spec.horizon
    packed = ds.pack(L)
    K = int(rollouts_per_state)
    if K < 1:
        raise ValueError("rollouts_per_state must be positive")
    idx = np.argwhere(packed.valid)
    S = packed.states[idx[:, 0], idx[:, 1]]
    A = packed.actions[idx[:, 0], idx[:, 1]]
    remaining = L - idx[:, 1]
    starts = np.repeat(S, K, axis=0)
    steps = np.repeat(remaining, K)
    gq = model_rollouts(model, env, pi_e, starts, rng, steps, first_actions=np.repeat(A, K, axis=0)).reshape(-1, K)
    gv = model_rollouts(model, env, pi_e, starts, rng, steps).reshape(-1, K)
    shape = packed.valid.shape
    out = [np.zeros(shape) for _ in range(4)]
    se = (lambda x: x.std(axis=1, ddof=1) / np.sqrt(K)) if K > 1 else (lambda x: np.zeros(len(x)))
    for arr, vals in zip(out, (gq.mean(axis=1), gv.mean(axis=1), se(gq), se(gv))):
        arr[idx[:, 0], idx[:, 1]] = vals
    return MonteCarloValueFunctions(*out)


# -- model-based estimate -----------------------------------------------------

def mb_estimate(ds: Dataset, pi_e, pi_b, env, model_kind: str, rng=None, rollouts: int = 1000) -> float:
    """Value of ``pi_e`` in a model learned from all of ``ds`` (raw scale).

    Tabular models are evaluated exactly by backward induction; regression
    models by ``rollouts`` simulated episodes started from observed initial
    states.
    """
    if len(ds) == 0:
        raise ModelError("model-based estimate needs a non-empty dataset")
    if model_kind == "tabular":
        model = learn_tabular(ds, env.state_count, env.action_count)
        vf = value_iteration(model, pi_e, env.spec, env.reward_table())
        return float(model.d0 @ vf.v[0])
    if model_kind not in FEATURE_MAPS:
        raise ValueError(f"unknown model kind {model_kind!r}")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = learn_regression(ds, model_kind)
    starts = model.initial_states[rng.integers(0, len(model.initial_states), rollouts)]
    return float(model_rollouts(model, env, pi_e, starts, rng, env.spec.horizon).mean())


class ModelBasedEstimator:
    """MB for the bootstrap: a fresh model is fitted to every resample."""

    def __init__(self, env, model_kind: str, rollouts: int = 1000, seed: int = 0, chunk: int | None = None):
        if model_kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {model_kind!r}")
        self.env = env
        self.model_kind = model_kind
        self.rollouts = rollouts
        self.seed = seed
        self.chunk = chunk
        self.name = f"mb-{'tabular' if model_kind == 'tabular' else model_kind[:1] + 'r'}"

    def __call__(self, ds, pi_e, pi_b) -> float:
        return float(self.prepare(ds, pi_e, pi_b).evaluate(np.arange(len(ds))[None])[0])

    def prepare(self, ds, pi_e, pi_b):
        if self.model_kind == "tabular":
            return PreparedTabularMB(ds, pi_e, self.env, chunk=self.chunk or 64)
        return PreparedRegressionMB(ds, pi_e, self.env, self.model_kind, self.rollouts, self.seed,
                                    chunk=self.chunk or 16)


class PreparedTabularMB:
    """Backward induction for many resampled tabular models at once.

    Only states recorded in the dataset can be reached by any resampled
    model, so the recursion runs over that compact state set. With
    ``X[u] = pi_e(a_u | s_u) * P_hat(s'_u | s_u, a_u)`` over observed triples
    ``u`` and ``stay[s]`` the policy mass on unvisited (self-looping) pairs,
    one backup is ``v <- R_pi + gamma * (G (X * v[s']) + stay * v)`` with
    ``G`` summing triples by source state.
    """

    def __init__(self, ds: Dataset, pi_e, env, chunk: int = 64):
        self.n = len(ds)
        self.chunk = chunk
        self.spec = env.spec
        A = env.action_count
        all_states = np.unique(np.concatenate([t.states for t in ds]))
        K = all_states.size
        remap = lambda x: np.searchsorted(all_states, x)  # noqa: E731
        owners, s, a, s2 = transitions(ds)
        pi = pi_e.probs[all_states]
        self.R_pi = np.einsum("ka,ka->k", pi, np.asarray(env.reward_table(), dtype=float)[all_states])
        self.K = K
        if owners.size:
            key = (remap(s) * A + a) * K + remap(s2)
            uniq, inv = np.unique(key, return_inverse=True)
            U = uniq.size
            self.C = sp.csr_matrix((np.ones(owners.size), (inv, owners)), shape=(U, self.n))
            self.C.sum_duplicates()
            sa = uniq // K
            sa_rows, group = np.unique(sa, return_inverse=True)
            self.next_state = uniq % K
            # triples -> their (s, a) row, and (s, a) rows -> source state
            self.to_sa = sp.csr_matrix((np.ones(U), (group, np.arange(U))), shape=(sa_rows.size, U))
            self.group = group
            self.pi_sa = pi.reshape(-1)[sa_rows]
            self.sa_to_state = sp.csr_matrix((self.pi_sa, (sa_rows // A, np.arange(sa_rows.size))),
                                             shape=(K, sa_rows.size))
            self.G = sp.csr_matrix((np.ones(U), (sa // A, np.arange(U))), shape=(K, U))
        else:
            self.C = None
        s0 = remap(np.array([int(t.states[0]) for t in ds]))
        self.S0 = sp.csr_matrix((np.ones(self.n), (s0, np.arange(self.n))), shape=(K, self.n))
        self.diagnostics = {"model_states": int(K)}

    def evaluate(self, indices):
        indices = np.asarray(indices)
        out = np.empty(indices.shape[0])
        for lo in range(0, indices.shape[0], self.chunk):
            block = indices[lo: lo + self.chunk]
            out[lo: lo + len(block)] = self._values(multiplicities(block, self.n), block.shape[1])
        return out

    def _values(self, M, m):
        gamma = self.spec.gamma
        b = M.shape[0]
        d0 = np.asarray(self.S0 @ M.T) / m
        R = self.R_pi[:, None]
        if self.C is None:
            stay = np.ones((self.K, b))
        else:
            counts = np.asarray(self.C @ M.T)
            totals = np.asarray(self.to_sa @ counts)
            visited = totals > 0
            X = counts / np.where(visited, totals, 1.0)[self.group] * self.pi_sa[self.group, None]
            stay = 1.0 - np.asarray(self.sa_to_state @ visited.astype(float))
        v = np.zeros((self.K, b))
        for _ in range(self.spec.horizon):
            nxt = stay * v
            if self.C is not None:
                nxt += self.G @ (X * v[self.next_state])
            v = R + gamma * nxt
        return np.einsum("kb,kb->b", d0, v)


class PreparedRegressionMB:
    """Regression MB for many resamples.

    Each trajectory contributes Gram statistics; a resample's least-squares
    fit is a multiplicity-weighted sum of them. Rollouts use common random
    numbers across resamples so the spread reflects model differences.
    """

    def __init__(self, ds: Dataset, pi_e, env, feature_map: str, rollouts: int, seed: int, chunk: int = 16):
        self.n = len(ds)
        self.env, self.pi_e, self.feature_map = env, pi_e, feature_map
        self.rollouts, self.chunk = rollouts, chunk
        owners, X, Y = regression_data(ds, feature_map)
        d = ds[0].states.shape[1]
        k = ds[0].actions.shape[1]
        p = feature_dim(d, k, feature_map)
        self.p, self.d = p, d
        self.G = np.zeros((self.n, p, p))
        self.Cxy = np.zeros((self.n, p, d))
        self.Cyy = np.zeros((self.n, d, d))
        self.N = np.zeros(self.n)
        if owners.size:
            np.add.at(self.G, owners, X[:, :, None] * X[:, None, :])
            np.add.at(self.Cxy, owners, X[:, :, None] * Y[:, None, :])
            np.add.at(self.Cyy, owners, Y[:, :, None] * Y[:, None, :])
            self.N = np.bincount(owners, minlength=self.n).astype(float)
        self.initial = np.array([t.states[0] for t in ds], dtype=float)
        rng = np.random.default_rng(seed)
        L = env.spec.horizon
        self.u0 = rng.random(rollouts)
        self.z_model = rng.standard_normal((L, rollouts, d))
        self.z_policy = rng.standard_normal((L, rollouts, k))
        self.rng = rng
        self.diagnostics = {"rollouts": rollouts, "feature_map": feature_map}

    def fit(self, M):
        G = np.einsum("bn,npq->bpq", M, self.G) + RIDGE * np.eye(self.p)
        Cxy = np.einsum("bn,npd->bpd", M, self.Cxy)
        Cyy = np.einsum("bn,nde->bde", M, self.Cyy)
        N = M @ self.N
        W = np.linalg.solve(G, Cxy)
        # residual sum of squares: Y'Y - W'C - C'W + W'GW, with the ridge-free Gram
        G0 = G - RIDGE * np.eye(self.p)
        WtC = np.einsum("bpd,bpe->bde", W, Cxy)
        rss = Cyy - WtC - WtC.transpose(0, 2, 1) + np.einsum("bpd,bpq,bqe->bde", W, G0, W)
        Q = rss / np.where(N > 0, N, 1.0)[:, None, None]
        Q = 0.5 * (Q + Q.transpose(0, 2, 1))
        w, V = np.linalg.eigh(Q)
        chol = V * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
        return W, chol, N >= self.p

    def evaluate(self, indices):
        indices = np.asarray(indices)
        out = np.empty(indices.shape[0])
        for lo in range(0, indices.shape[0], self.chunk):
            block = indices[lo: lo + self.chunk]
            out[lo: lo + len(block)] = self._values(multiplicities(block, self.n))
        return out

    def _values(self, M):
        env, L = self.env, self.env.spec.horizon
        b, R = M.shape[0], self.rollouts
        W, chol, ok = self.fit(M)
        cdf = np.cumsum(M, axis=1)
        cdf /= cdf[:, -1:]
        pick = np.minimum((self.u0[None, :, None] >= cdf[:, None, :]).sum(axis=-1), self.n - 1)
        # flat (resample, rollout) pairs; finished rollouts are dropped as they end
        owner = np.repeat(np.arange(b), R)
        lane = np.tile(np.arange(R), b)
        s = self.initial[pick.ravel()]
        g = np.zeros(b * R)
        live = np.arange(b * R)
        cholT = chol.transpose(0, 2, 1)
        disc = 1.0
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(L):
                a = _policy_actions(self.pi_e, s, self.z_policy[t, lane[live]], self.rng)
                g[live] += disc * env.reward(s, a)
                keep = ~env.terminal(s)
                live, s, a = live[keep], s[keep], a[keep]
                if not live.size:
                    break
                phi = features(s, a, self.feature_map)
                own = owner[live]
                s = (np.matmul(phi[:, None, :], W[own])[:, 0]
                     + np.matmul(self.z_model[t, lane[live]][:, None, :], cholT[own])[:, 0])
                disc *= env.spec.gamma
        vals = g.reshape(b, R).mean(axis=1)
        if not ok.all():
            warnings.warn("underdetermined regression on some resamples", RuntimeWarning, stacklevel=2)
        return np.where(ok, vals, np.nan)
