"""Semiclassical and exact propagation of Gaussian wavepackets on 2D grids."""

__version__ = "0.1.0"

from .core import (
    ComplexPhasePoint,
    ComplexTrajectory,
    Grid2D,
    TangentMatrix,
    WaveField,
    WavepacketParams,
    coherent_state_amplitude,
    overlap,
    sample_on_grid,
)

__all__ = [
    "ComplexPhasePoint",
    "ComplexTrajectory",
    "Grid2D",
    "TangentMatrix",
    "WaveField",
    "WavepacketParams",
    "coherent_state_amplitude",
    "overlap",
    "sample_on_grid",
]
