"""Domain-adaptive diffusion (DAD) with a mutual learning strategy (MLS), on numpy.

Modules: ``numerics`` (autograd, RNG, optimizers), ``diffusion`` (schedule and
DDPM steps), ``models``, ``dad``, ``mls`` (training loop and runners),
``domains`` (synthetic data), ``metrics``, ``config`` and ``cli``.
"""

from .config import PRESETS, ConfigError, ExperimentConfig, apply_preset, parse_config, serialize_config
from .mls import AdaptationReport, InvariantViolation, run_direct_transition, run_experiment, run_mls

__all__ = [
    "PRESETS",
    "AdaptationReport",
    "ConfigError",
    "ExperimentConfig",
    "InvariantViolation",
    "apply_preset",
    "parse_config",
    "run_direct_transition",
    "run_experiment",
    "run_mls",
    "serialize_config",
]
__version__ = "0.1.0"
