"""Mask-conditioned wavelet diffusion for lesion synthesis, with phantom data and a detection harness."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    FormatError,
    GenerationError,
    NumericalError,
    PlacementError,
    SalientError,
    SamplingError,
    TrainingError,
    ValidationError,
)
from .wavelet import band_stats, boundary_weight_map, dwt2, idwt2  # noqa: E402

__all__ = [
    "__version__",
    "ConfigError", "DimensionError", "FormatError", "GenerationError", "NumericalError", "PlacementError",
    "SalientError", "SamplingError", "TrainingError", "ValidationError",
    "band_stats", "boundary_weight_map", "dwt2", "idwt2",
]
