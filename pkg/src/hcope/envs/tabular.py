"""Finite MDPs given by explicit tables; used for micro-MDP checks."""

from __future__ import annotations

import numpy as np

from ..mdp import MdpSpec
from ..policies import TabularPolicy


class TabularMDP:
    """``(P, r, d0, gamma, L)`` with ``P`` of shape ``S x A x S``."""

    discrete = True

    def __init__(self, P, r, d0, gamma: float = 1.0, horizon: int = 3, env_id: str = "tabular",
                 r_min: float | None = None, r_max: float | None = None):
        P = np.array(P, dtype=float)
        r = np.array(r, dtype=float)
        d0 = np.array(d0, dtype=float)
        S, A = r.shape
        if P.shape != (S, A, S):
            raise ValueError(f"P must have shape {(S, A, S)}, got {P.shape}")
        if d0.shape != (S,):
            raise ValueError("d0 must have one entry per state")
        if np.any(P < 0) or not np.allclose(P.sum(axis=2), 1.0, atol=1e-9):
            raise ValueError("P rows must be probability distributions")
        if np.any(d0 < 0) or abs(d0.sum() - 1.0) > 1e-9:
            raise ValueError("d0 must be a probability distribution")
        for a in (P, r, d0):
            a.setflags(write=False)
        self.P, self.r, self.d0 = P, r, d0
        self.env_id = env_id
        lo = min(0.0, float(r.min())) if r_min is None else r_min
        hi = float(r.max()) if r_max is None else r_max
        self.spec = MdpSpec(gamma, horizon, lo, hi)
        self._cdf = np.cumsum(P, axis=2)
        self._cdf[..., -1] = 1.0
        self._d0_cdf = np.cumsum(d0)
        self._d0_cdf[-1] = 1.0

    @property
    def state_count(self) -> int:
        return self.r.shape[0]

    @property
    def action_count(self) -> int:
        return self.r.shape[1]

    def reward_table(self) -> np.ndarray:
        return self.r

    def reset_batch(self, n, rng):
        return np.searchsorted(self._d0_cdf, rng.random(n), side="right").astype(np.int64)

    def observe_batch(self, phys):
        return phys

    def step_batch(self, phys, actions, rng):
        u = rng.random(np.shape(phys))
        nxt = (u[..., None] >= self._cdf[phys, actions]).sum(axis=-1).astype(np.int64)
        return nxt, self.r[phys, actions], np.zeros(np.shape(phys), dtype=bool)

    def step(self, s, a, rng):
        if not 0 <= int(a) < self.action_count:
            raise ValueError(f"invalid action {a}")
        nxt, rew, term = self.step_batch(np.array([int(s)]), np.array([int(a)]), rng)
        return int(nxt[0]), float(rew[0]), bool(term[0])


def random_tabular_mdp(rng, states: int, actions: int, horizon: int, gamma: float = 1.0,
                       env_id: str = "micro-mdp", concentration: float = 1.0) -> TabularMDP:
    P = rng.dirichlet(np.full(states, concentration), size=(states, actions))
    r = rng.uniform(0.0, 1.0, size=(states, actions))
    d0 = rng.dirichlet(np.full(states, 2.0))
    return TabularMDP(P, r, d0, gamma, horizon, env_id, r_min=0.0, r_max=1.0)


def random_tabular_policy(rng, states: int, actions: int, policy_id: str = "tabular",
                          concentration: float = 1.0) -> TabularPolicy:
    return TabularPolicy(rng.dirichlet(np.full(actions, concentration), size=states), policy_id)


# (states, actions, horizon, gamma, seed) for the three fixed micro-MDPs
MICRO_MDPS = (
    (2, 2, 2, 1.0, 101),
    (3, 2, 3, 0.9, 202),
    (4, 3, 3, 1.0, 303),
)


def micro_mdp(index: int = 2):
    """One of three fixed micro-MDPs with an evaluation and a behavior policy.

    Returns ``(mdp, pi_e, pi_b)``. The behavior policy has full support; the
    evaluation policy is a random table.
    """
    S, A, L, gamma, seed = MICRO_MDPS[index]
    rng = np.random.default_rng(seed)
    mdp = random_tabular_mdp(rng, S, A, L, gamma, env_id=f"micro-mdp-{index}")
    pi_e = random_tabular_policy(rng, S, A, "micro-eval")
    pi_b = random_tabular_policy(rng, S, A, "micro-behavior", concentration=5.0)
    return mdp, pi_e, pi_b
