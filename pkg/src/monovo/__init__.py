"""Monocular keyframe visual odometry with retracking and windowed BA."""

from .errors import (
    AmbiguousDecompositionError,
    AssociationError,
    BehindCameraError,
    CheiralityError,
    DegenerateConfigError,
    EstimationFailure,
    GenerationError,
    LowParallaxError,
    NumericError,
    VoError,
)
from .geometry import CameraModel, Landmark, Pose, compose, inverse, triangulate
from .pipeline import FrameResult, VisualOdometry, VoConfig

__version__ = "0.1.0"

__all__ = [
    "AmbiguousDecompositionError",
    "AssociationError",
    "BehindCameraError",
    "CameraModel",
    "CheiralityError",
    "DegenerateConfigError",
    "EstimationFailure",
    "FrameResult",
    "GenerationError",
    "Landmark",
    "LowParallaxError",
    "NumericError",
    "Pose",
    "VisualOdometry",
    "VoConfig",
    "VoError",
    "compose",
    "inverse",
    "triangulate",
    "__version__",
]
