"""Probabilistic cataloguing of moving point sources from longitudinal
photon-count images: forward model, HMC inference, simulator, and metrics."""

from .types import (
    Catalogue,
    DisplacementField,
    IntensityField,
    InvariantError,
    ModelConfig,
    ObservationStack,
)

__all__ = [
    "Catalogue",
    "DisplacementField",
    "IntensityField",
    "InvariantError",
    "ModelConfig",
    "ObservationStack",
]

__version__ = "0.1.0"
