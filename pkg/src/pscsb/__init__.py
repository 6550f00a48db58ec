"""Piecewise-stationary combinatorial semi-bandits with causally coupled rewards."""

from .sem_core import AdjacencyMatrix, Scenario, SyntheticParams, generate_synthetic_scenario
from .policies import POLICY_NAMES, make_policy
from .harness import ExperimentConfig, run_episode, run_experiment

__all__ = [
    "AdjacencyMatrix", "Scenario", "SyntheticParams", "generate_synthetic_scenario",
    "POLICY_NAMES", "make_policy", "ExperimentConfig", "run_episode", "run_experiment",
]
__version__ = "0.1.0"
