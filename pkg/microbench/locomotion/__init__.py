"""
Desk-scale model-based RL: simulated attitude dynamics, k-means data filtering,
MLP dynamics and random-shooting MPC
"""
from microbench.locomotion.dynamics import DynamicsModel, TrainConfig, train_dynamics
from microbench.locomotion.env import TransitionDataset, collect_rollout, env_step, random_policy
from microbench.locomotion.filtering import distribution_summary, kmeans_filter
from microbench.locomotion.mbrl import MbrlConfig, evaluate_policy, fig4_sweep, mbrl_iteration, run_mbrl
from microbench.locomotion.mpc import MpcConfig, mpc_action

__all__ = [
    "DynamicsModel",
    "MbrlConfig",
    "MpcConfig",
    "TrainConfig",
    "TransitionDataset",
    "collect_rollout",
    "distribution_summary",
    "env_step",
    "evaluate_policy",
    "fig4_sweep",
    "kmeans_filter",
    "mbrl_iteration",
    "mpc_action",
    "random_policy",
    "run_mbrl",
    "train_dynamics",
]
