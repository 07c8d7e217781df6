"""Desk-scale simulator for federated distillation, federated averaging and
generative federated augmentation, with exact communication-cost accounting."""

from .config import ExperimentConfig, load_config
from .harness import cost_calculator, run_experiment, run_repeated, sweep

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "load_config", "cost_calculator", "run_experiment", "run_repeated", "sweep"]
