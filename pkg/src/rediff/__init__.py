"""Monte Carlo laboratory for diffusions in random environments."""
from .environment import ConfigError, EnvironmentSpec, UsageError, coefficients, realize
from .sde import (
    BallRegion,
    BoxRegion,
    GridSpec,
    PathConfig,
    SlabRegion,
    annealed_batch,
    quenched_batch,
    simulate_exit,
)

__version__ = "0.1.0"

__all__ = [
    "BallRegion",
    "BoxRegion",
    "ConfigError",
    "EnvironmentSpec",
    "GridSpec",
    "PathConfig",
    "SlabRegion",
    "UsageError",
    "annealed_batch",
    "coefficients",
    "quenched_batch",
    "realize",
    "simulate_exit",
]
