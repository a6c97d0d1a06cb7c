"""Federated spatial-temporal lifelong learning simulator for person re-identification."""
from .config import ExperimentConfig, load_config
from .runner import run_experiment

__all__ = ["ExperimentConfig", "load_config", "run_experiment"]
__version__ = "0.1.0"
