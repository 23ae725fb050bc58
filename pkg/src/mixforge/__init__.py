"""mixforge: learned saliency-guided sample mixing for image classifiers."""

from mixforge.errors import (
    CheckpointError,
    ConfigError,
    ConsistencyError,
    DependencyError,
    DivergenceError,
    InputError,
    MixforgeError,
    NumericError,
    UnsupportedArchitectureError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "ConsistencyError",
    "DependencyError",
    "DivergenceError",
    "InputError",
    "MixforgeError",
    "NumericError",
    "UnsupportedArchitectureError",
    "__version__",
]
