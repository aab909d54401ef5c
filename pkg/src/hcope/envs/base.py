"""Vectorised episode simulation shared by all environments.

An environment provides batch primitives:

* ``reset_batch(n, rng)`` -> physical start states
* ``observe_batch(phys)`` -> the states recorded in trajectories
* ``step_batch(phys, actions, rng)`` -> ``(next_phys, rewards, terminal)``

``terminal`` flags a step taken *in* an absorbing state: that step is still
recorded and the episode ends after it.
"""

from __future__ import annotations

import numpy as np

from ..mdp import Dataset, Trajectory


def simulate(env, policy, n: int, rng: np.random.Generator, record: bool = True):
    """Run ``n`` episodes in lockstep; return trajectories or just returns."""
    L = env.spec.horizon
    disc = env.spec.discounts
    phys = env.reset_batch(n, rng)
    alive = np.ones(n, dtype=bool)
    lengths = np.zeros(n, dtype=np.int64)
    terminal = np.zeros(n, dtype=bool)
    returns = np.zeros(n)
    obs_log, act_log, rew_log = [], [], []
    for t in range(L):
        obs = env.observe_batch(phys)
        actions = policy.sample_actions(obs, rng)
        nxt, rewards, term = env.step_batch(phys, actions, rng)
        returns += np.where(alive, disc[t] * rewards, 0.0)
        lengths += alive
        if record:
            obs_log.append(obs)
            act_log.append(actions)
            rew_log.append(rewards)
        ended = alive & term
        terminal |= ended
        alive &= ~term
        phys = nxt
        if not alive.any():
            break
    if not record:
        return returns
    obs_arr = np.stack(obs_log, axis=1)
    act_arr = np.stack(act_log, axis=1)
    rew_arr = np.stack(rew_log, axis=1)
    return [
        Trajectory(obs_arr[i, : lengths[i]], act_arr[i, : lengths[i]], rew_arr[i, : lengths[i]], terminal[i])
        for i in range(n)
    ]


def sample_trajectories(env, policy, n: int, rng: np.random.Generator) -> list:
    if n < 1:
        return []
    return simulate(env, policy, n, rng, record=True)


def sample_trajectory(env, policy, rng: np.random.Generator) -> Trajectory:
    return sample_trajectories(env, policy, 1, rng)[0]


def sample_dataset(env, policy, n: int, rng: np.random.Generator) -> Dataset:
    return Dataset(tuple(sample_trajectories(env, policy, n, rng)), policy.policy_id, env.env_id)


def monte_carlo_ground_truth(env, policy, num_rollouts: int, rng: np.random.Generator, batch: int = 20000):
    """Mean return of ``policy`` over fresh rollouts, with its standard error."""
    if num_rollouts < 1:
        raise ValueError("num_rollouts must be at least 1")
    done = 0
    chunks = []
    while done < num_rollouts:
        k = min(batch, num_rollouts - done)
        chunks.append(simulate(env, policy, k, rng, record=False))
        done += k
    g = np.concatenate(chunks)
    mean = float(g.mean())
    if num_rollouts == 1:
        return mean, 0.0
    stderr = float(g.std(ddof=1) / np.sqrt(num_rollouts))
    return mean, stderr
