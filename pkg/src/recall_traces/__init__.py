"""Backtracking models and recall traces for actor-critic agents."""

from .agent import PolicyCritic, gae
from .backtrack import (BacktrackModel, Trace, backtrack_loss, generate_trace,
                        random_backtrack_model, train_backtrack)
from .boltzmann import (BoltzmannTask, SoftPolicy, anneal_schedule, anneal_train,
                        boltzmann_target, free_energy_decomposition)
from .buffer import PerBuffer, ReplayBuffer, Trajectory, select_high_value_states
from .env import ChainMDP, FourRoomEnv, PointMassEnv, Transition
from .nn import CategoricalHead, GaussianHead, Mlp
from .orchestrator import (LoopConfig, RunMetrics, fit_reverse_kl, imitation_loss,
                           imitation_step, run_training, trajectory_posterior, verify_elbo)

__all__ = [
    "BacktrackModel", "BoltzmannTask", "CategoricalHead", "ChainMDP", "FourRoomEnv",
    "GaussianHead", "LoopConfig", "Mlp", "PerBuffer", "PointMassEnv", "PolicyCritic",
    "ReplayBuffer", "RunMetrics", "SoftPolicy", "Trace", "Trajectory", "Transition",
    "anneal_schedule", "anneal_train", "backtrack_loss", "boltzmann_target",
    "fit_reverse_kl", "free_energy_decomposition", "gae", "generate_trace", "imitation_loss",
    "imitation_step", "random_backtrack_model", "run_training", "select_high_value_states",
    "train_backtrack", "trajectory_posterior", "verify_elbo",
]
