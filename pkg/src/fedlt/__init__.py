"""Desk-scale federated long-tailed learning simulator with self-bootstrap distillation."""

from ._accel import backend
from .config import ExperimentConfig, load_config, parse_config
from .federation import run_experiment, run_variant

__all__ = ["ExperimentConfig", "backend", "load_config", "parse_config", "run_experiment", "run_variant"]
__version__ = "0.1.0"
