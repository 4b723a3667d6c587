"""Exception types raised by the odometry library."""


class VoError(Exception):
    """Base class for all library errors."""


class BehindCameraError(VoError):
    """Point has non-positive depth in the camera frame."""


class LowParallaxError(VoError):
    """Viewing rays are too close to parallel to triangulate."""


class CheiralityError(VoError):
    """Triangulated point falls behind one of the cameras."""


class DegenerateConfigError(VoError):
    """Input configuration is degenerate for the requested solver."""


class AmbiguousDecompositionError(VoError):
    """No essential-matrix factorization puts a majority of points in front."""


class EstimationFailure(VoError):
    """Robust estimation could not produce a supported model."""


class NumericError(VoError):
    """A numeric routine failed to converge or produced non-finite values."""


class AssociationError(VoError):
    """Trajectory association produced no pairs."""


class GenerationError(VoError):
    """Synthetic scene generation could not satisfy its constraints."""
