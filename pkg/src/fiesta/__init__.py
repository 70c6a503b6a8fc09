"""Streamline bundle toolkit: latent-space segmentation, threshold
calibration, generative bundle completion, and test-retest metrics, with a
deterministic synthetic phantom and a file-based pipeline CLI.
"""

from .errors import (
    ConfigError,
    DegenerateInputError,
    FiestaError,
    FormatError,
    GenerationError,
    TrainingDivergedError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "FiestaError",
    "FormatError",
    "GenerationError",
    "TrainingDivergedError",
    "__version__",
]
