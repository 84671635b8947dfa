"""Exception types shared across the engine."""


class Iris3dError(Exception):
    """Base class for all engine errors."""


class PlyError(Iris3dError):
    """Malformed, truncated or unsupported PLY data."""


class DatasetError(Iris3dError):
    """Missing or inconsistent IRIS dataset contents."""


class SessionError(Iris3dError):
    """Invalid session document (schema, duplicate ids/colors)."""


class CameraError(Iris3dError):
    """Invalid camera parameters or degenerate projection."""


class PointAtCameraPlaneError(CameraError):
    """Projected point has zero depth (lies on the camera plane)."""


class DegenerateInputError(Iris3dError):
    """Input configuration too degenerate for the requested operation."""


class NoRestrictedTransformError(Iris3dError):
    """No 9-DoF (skew-free) transform exists under any correspondence."""


class SolverError(Iris3dError):
    """Numerical solver failed to make progress."""


class NothingToSnapError(Iris3dError):
    """Reduced scene crop is empty; snapping has no target."""


class ProtocolError(Iris3dError):
    """Malformed wire request."""
