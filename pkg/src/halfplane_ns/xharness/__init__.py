"""Experiment harness: config parsing, presets, the registered experiments and the CLI."""

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, config_text, default_config, parse_config, run_id
from .criteria import CRITERIA, CRITERIA_VERSION
from .experiments import REGISTRY, ExperimentResult, run_experiment
from .cli import main

__all__ = ["EXPERIMENTS", "ConfigError", "ExperimentConfig", "config_text", "default_config",
           "parse_config", "run_id", "CRITERIA", "CRITERIA_VERSION", "REGISTRY",
           "ExperimentResult", "run_experiment", "main"]
