"""Prompt-anchored vision-text distillation for lifelong person re-identification."""
from .config import ExperimentConfig, configure_variant, load_config, resolve_freeze_policy
from .lifelong import run_sequence

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "configure_variant", "load_config", "resolve_freeze_policy",
           "run_sequence", "__version__"]
