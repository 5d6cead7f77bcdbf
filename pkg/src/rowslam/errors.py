"""Exception hierarchy shared by every estimator."""


class RowSlamError(Exception):
    """Base class for all errors raised by rowslam."""


class NonPositiveDepth(RowSlamError):
    pass


class RayParallelToPlane(RowSlamError):
    pass


class IntersectionBehindCamera(RowSlamError):
    pass


class ZeroOffsetPlane(RowSlamError):
    pass


class DegenerateInput(RowSlamError):
    pass


class NoConsensus(RowSlamError):
    pass


class NearParallelInputs(RowSlamError):
    pass


class InsufficientMotion(RowSlamError):
    pass


class BehindCamera(RowSlamError):
    pass


class MissingDisplacement(RowSlamError):
    pass


class EmptyMap(RowSlamError):
    pass


class InsufficientLandmarks(RowSlamError):
    pass


class NoLinkedTracks(RowSlamError):
    pass


class IndexOutOfRange(RowSlamError, IndexError):
    """Requested frame index is outside the trajectory."""


class LogFormatError(RowSlamError, ValueError):
    """Observation log or JSON document does not match the expected schema."""
