"""Discretised MountainCar with frame skipping.

The physical state is ``(position, velocity)``; trajectories record the grid
cell index. Cell ``position_bins * velocity_bins`` is the absorbing goal:
once the car reaches ``goal_position`` the next recorded step sits in that
cell with reward 0 and the episode ends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mdp import MdpSpec
from ..policies import TabularPolicy

LEFT, NEUTRAL, RIGHT = 0, 1, 2


@dataclass(frozen=True)
class MountainCarConfig:
    position_bins: int = 64
    velocity_bins: int = 64
    frame_skip: int = 4
    horizon: int = 100
    gamma: float = 1.0
    min_position: float = -1.2
    max_position: float = 0.6
    max_speed: float = 0.07
    goal_position: float = 0.5
    force: float = 0.001
    gravity: float = 0.0025
    start_low: float = -0.6
    start_high: float = -0.4

    def __post_init__(self):
        if self.frame_skip < 1:
            raise ValueError("frame_skip must be at least 1")
        if self.position_bins < 1 or self.velocity_bins < 1:
            raise ValueError("grid needs at least one bin per axis")


class MountainCarEnv:
    env_id = "mountain-car-v0"
    discrete = True
    action_count = 3

    def __init__(self, config: MountainCarConfig | None = None):
        self.config = config or MountainCarConfig()
        c = self.config
        self.spec = MdpSpec(c.gamma, c.horizon, -1.0, 0.0)
        self.goal_index = c.position_bins * c.velocity_bins

    @property
    def state_count(self) -> int:
        return self.goal_index + 1

    def cell(self, pos_bin, vel_bin):
        return np.asarray(pos_bin) * self.config.velocity_bins + np.asarray(vel_bin)

    def bins(self, index):
        return np.divmod(np.asarray(index), self.config.velocity_bins)

    def velocity_centers(self) -> np.ndarray:
        c = self.config
        width = 2 * c.max_speed / c.velocity_bins
        return -c.max_speed + (np.arange(c.velocity_bins) + 0.5) * width

    def reward_table(self) -> np.ndarray:
        r = np.full((self.state_count, self.action_count), -1.0)
        r[self.goal_index] = 0.0
        return r

    def observe_batch(self, phys):
        c = self.config
        pos, vel = phys[..., 0], phys[..., 1]
        pb = ((pos - c.min_position) / (c.max_position - c.min_position) * c.position_bins).astype(np.int64)
        vb = ((vel + c.max_speed) / (2 * c.max_speed) * c.velocity_bins).astype(np.int64)
        pb = np.clip(pb, 0, c.position_bins - 1)
        vb = np.clip(vb, 0, c.velocity_bins - 1)
        return np.where(pos >= c.goal_position, self.goal_index, self.cell(pb, vb))

    def reset_batch(self, n, rng):
        c = self.config
        return np.stack([rng.uniform(c.start_low, c.start_high, n), np.zeros(n)], axis=-1)

    def physics(self, pos, vel, action):
        c = self.config
        push = (np.asarray(action) - 1) * c.force
        for _ in range(c.frame_skip):
            vel = np.clip(vel + push - c.gravity * np.cos(3 * pos), -c.max_speed, c.max_speed)
            pos = np.clip(pos + vel, c.min_position, c.max_position)
            vel = np.where((pos <= c.min_position) & (vel < 0), 0.0, vel)
        return pos, vel

    def step_batch(self, phys, actions, rng):
        actions = np.asarray(actions)
        if np.any((actions < 0) | (actions > 2)):
            raise ValueError("MountainCar actions are 0 (left), 1 (neutral), 2 (right)")
        pos, vel = phys[..., 0], phys[..., 1]
        at_goal = pos >= self.config.goal_position
        npos, nvel = self.physics(pos, vel, actions)
        npos = np.where(at_goal, pos, npos)
        nvel = np.where(at_goal, vel, nvel)
        rewards = np.where(at_goal, 0.0, -1.0)
        return np.stack([npos, nvel], axis=-1), rewards, at_goal

    def step(self, s, a, rng=None):
        if int(a) not in (LEFT, NEUTRAL, RIGHT):
            raise ValueError(f"invalid action {a}")
        nxt, r, term = self.step_batch(np.asarray(s, dtype=float)[None], np.array([int(a)]), rng)
        return nxt[0], float(r[0]), bool(term[0])


def energy_pumping_policy(env: MountainCarEnv, epsilon: float = 0.1, policy_id: str = "energy-pump") -> TabularPolicy:
    """Push in the direction of the cell's velocity, mixed with uniform noise."""
    greedy = np.where(env.velocity_centers() >= 0, RIGHT, LEFT)
    greedy = np.tile(greedy, env.config.position_bins)
    greedy = np.append(greedy, NEUTRAL)
    probs = np.full((env.state_count, env.action_count), epsilon / env.action_count)
    probs[np.arange(env.state_count), greedy] += 1.0 - epsilon
    return TabularPolicy(probs, policy_id)
