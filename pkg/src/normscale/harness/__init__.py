"""Configuration, corpus handling, training runs, sweeps and reports."""

from .config import RunConfig, config_from_dict, load_config
from .report import emit_report
from .sweep import run_sweep
from .train import run_training

__all__ = ["RunConfig", "config_from_dict", "emit_report", "load_config", "run_sweep", "run_training"]
