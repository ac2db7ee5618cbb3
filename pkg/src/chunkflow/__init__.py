"""Chunk-to-chunk flow matching for video continuation, at desk scale."""

from .errors import (
    ChunkflowError, ConfigError, DegenerateInputError, DivergenceError, InfeasibleError, ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ChunkflowError", "ConfigError", "DegenerateInputError", "DivergenceError", "InfeasibleError",
    "ShapeError", "__version__",
]
