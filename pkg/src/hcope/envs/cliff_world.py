"""Continuous point-mass CliffWorld with linear-Gaussian dynamics.

State ``(x, y, vx, vy)``, action ``(ax, ay)``. Transitions are exactly
``s' = A s + B a + eta`` with ``eta ~ N(0, Q)``. A state inside a cliff
rectangle or outside the world is a fall: that step pays ``cliff_penalty``
and ends the episode. A state within ``goal_radius`` of the goal pays 0 and
ends the episode. Otherwise the reward is
``-(|pos - goal|_1 + |a|_1)`` with each action component's cost capped at
``action_cost_cap`` so rewards stay bounded.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mdp import MdpSpec
from ..policies import GaussianPolicy


@dataclass(frozen=True)
class CliffWorldConfig:
    world: tuple = (0.0, 10.0)
    goal: tuple = (9.0, 9.0)
    goal_radius: float = 0.75
    # (x0, y0, x1, y1); two walls leaving a gap around x = 5
    cliffs: tuple = ((0.0, 4.5, 4.0, 5.5), (6.0, 4.5, 10.0, 5.5))
    cliff_penalty: float = -100.0
    horizon: int = 50
    gamma: float = 1.0
    dt: float = 0.5
    noise: float = 0.01
    start: tuple = (1.0, 1.0)
    start_std: float = 0.2
    action_cost_cap: float = 2.0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise variance must be non-negative")
        for c in self.cliffs:
            if len(c) != 4 or c[0] >= c[2] or c[1] >= c[3]:
                raise ValueError(f"bad cliff rectangle {c}")


class CliffWorldEnv:
    env_id = "cliff-world-v0"
    discrete = False
    state_dim = 4
    action_dim = 2

    def __init__(self, config: CliffWorldConfig | None = None):
        self.config = config or CliffWorldConfig()
        c = self.config
        lo, hi = c.world
        max_dist = 2 * max(hi - lo, 0.0)
        step_floor = -(max_dist + 2 * c.action_cost_cap)
        self.spec = MdpSpec(c.gamma, c.horizon, min(c.cliff_penalty, step_floor), 0.0)
        dt = c.dt
        self.A = np.array([
            [1, 0, dt, 0],
            [0, 1, 0, dt],
            [0, 0, 1, 0],
            [0, 0, 0, 1],
        ], dtype=float)
        self.B = np.array([
            [0.5 * dt * dt, 0],
            [0, 0.5 * dt * dt],
            [dt, 0],
            [0, dt],
        ], dtype=float)
        self.Q = c.noise * np.eye(4)
        self._noise_chol = np.sqrt(c.noise) * np.eye(4)
        for a in (self.A, self.B, self.Q):
            a.setflags(write=False)
        self._goal = np.array(c.goal, dtype=float)
        self._cliffs = np.array(c.cliffs, dtype=float).reshape(-1, 4)

    def fallen(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        x, y = s[..., 0], s[..., 1]
        lo, hi = self.config.world
        # a diverged (non-finite) position counts as leaving the world
        out = ~((x >= lo) & (x <= hi) & (y >= lo) & (y <= hi))
        for x0, y0, x1, y1 in self._cliffs:
            out |= (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        return out

    def at_goal(self, states) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        return np.hypot(s[..., 0] - self._goal[0], s[..., 1] - self._goal[1]) <= self.config.goal_radius

    def terminal(self, states) -> np.ndarray:
        return self.fallen(states) | self.at_goal(states)

    def reward(self, states, actions) -> np.ndarray:
        s = np.asarray(states, dtype=float)
        a = np.asarray(actions, dtype=float)
        dist = np.abs(s[..., :2] - self._goal).sum(axis=-1)
        effort = np.minimum(np.abs(a), self.config.action_cost_cap).sum(axis=-1)
        r = -(dist + effort)
        r = np.where(self.at_goal(s), 0.0, r)
        return np.where(self.fallen(s), self.config.cliff_penalty, r)

    def mean_next(self, states, actions) -> np.ndarray:
        return np.asarray(states) @ self.A.T + np.asarray(actions) @ self.B.T

    def reset_batch(self, n, rng):
        c = self.config
        s = np.zeros((n, 4))
        s[:, :2] = np.array(c.start) + c.start_std * rng.standard_normal((n, 2))
        return s

    def observe_batch(self, phys):
        return phys

    def step_batch(self, phys, actions, rng):
        phys = np.asarray(phys, dtype=float)
        actions = np.asarray(actions, dtype=float)
        if actions.shape[-1] != 2:
            raise ValueError("CliffWorld actions are 2-d accelerations")
        noise = rng.standard_normal(phys.shape) @ self._noise_chol.T
        nxt = self.mean_next(phys, actions) + noise
        return nxt, self.reward(phys, actions), self.terminal(phys)

    def step(self, s, a, rng):
        nxt, r, term = self.step_batch(np.asarray(s, dtype=float)[None], np.asarray(a, dtype=float)[None], rng)
        return nxt[0], float(r[0]), bool(term[0])


def waypoint_controller(config: CliffWorldConfig | None = None, gain: float = 0.6, damping: float = 1.2,
                        limit: float = 1.0):
    """Hand-coded deterministic policy: steer through the cliff gap, then to the goal.

    A saturated PD law toward a waypoint chosen from the current height.
    """
    c = config or CliffWorldConfig()
    gap_x = 0.5 * (c.cliffs[0][2] + c.cliffs[1][0])
    wall_lo = min(r[1] for r in c.cliffs)
    wall_hi = max(r[3] for r in c.cliffs)
    below = np.array([gap_x, wall_lo - 0.5])
    through = np.array([gap_x, wall_hi + 1.0])
    goal = np.array(c.goal, dtype=float)

    def mean_fn(states):
        s = np.asarray(states, dtype=float)
        pos, vel = s[..., :2], s[..., 2:]
        y = s[..., 1:2]
        aligned = np.abs(s[..., 0:1] - gap_x) < 0.6
        target = np.where(y < wall_lo - 0.5, below, np.where(y < wall_hi + 0.5, np.where(aligned, through, below), goal))
        return np.clip(gain * (target - pos) - damping * vel, -limit, limit)

    return mean_fn


def cliff_policies(config: CliffWorldConfig | None = None, eval_var: float = 0.1, behavior_var: float = 0.3):
    mean_fn = waypoint_controller(config)
    pi_e = GaussianPolicy(mean_fn, eval_var * np.eye(2), "cliff-eval", "waypoint")
    pi_b = GaussianPolicy(mean_fn, behavior_var * np.eye(2), "cliff-behavior", "waypoint")
    return pi_e, pi_b
