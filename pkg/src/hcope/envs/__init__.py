from .base import monte_carlo_ground_truth, sample_dataset, sample_trajectories, sample_trajectory, simulate
from .cliff_world import CliffWorldConfig, CliffWorldEnv, cliff_policies, waypoint_controller
from .mountain_car import MountainCarConfig, MountainCarEnv, energy_pumping_policy
from .tabular import MICRO_MDPS, TabularMDP, micro_mdp, random_tabular_mdp, random_tabular_policy

__all__ = [
    "MICRO_MDPS",    "CliffWorldConfig", "CliffWorldEnv", "MountainCarConfig", "MountainCarEnv", "TabularMDP",
    "cliff_policies", "energy_pumping_policy", "micro_mdp", "monte_carlo_ground_truth",
    "random_tabular_mdp", "random_tabular_policy", "sample_dataset", "sample_trajectories",
    "sample_trajectory", "simulate", "waypoint_controller",
]
