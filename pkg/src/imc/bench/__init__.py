"""Benchmark harness: configs, presets, experiment runners and the ``imc`` CLI."""

from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .experiments import (
    evaluate_acceptance,
    landscape,
    noise_sweep,
    rank_experiment,
    rip_experiment,
    run_experiment,
)
from .presets import get_preset, preset_names

__all__ = [
    "ConfigError", "ExperimentConfig", "evaluate_acceptance", "from_dict", "get_preset", "landscape",
    "load_config", "noise_sweep", "preset_names", "rank_experiment", "rip_experiment", "run_experiment",
]
