"""Model-free ramp metering over a second-order freeway model, with online
fundamental-diagram estimation by algebraic differentiation."""

from .traffic_model import (
    BoundaryInput,
    Freeway,
    FreewayState,
    FundamentalDiagram,
    RampParams,
    SegmentParams,
    equilibrium_speed,
)

__version__ = "0.1.0"

__all__ = [
    "BoundaryInput",
    "Freeway",
    "FreewayState",
    "FundamentalDiagram",
    "RampParams",
    "SegmentParams",
    "equilibrium_speed",
]
