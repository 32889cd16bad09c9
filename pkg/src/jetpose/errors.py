"""Exception types shared across the package."""


class JetPoseError(Exception):
    """Base class for all errors raised by jetpose."""


class ImageFormatError(JetPoseError, ValueError):
    """Unsupported or corrupt image file."""


class OutOfBoundsError(JetPoseError, ValueError):
    """A coordinate or patch falls outside the image."""


class ImageTooSmallError(JetPoseError, ValueError):
    pass


class RankDeficientError(JetPoseError, ValueError):
    """Least-squares design matrix does not have full column rank."""


class InsufficientSamplesError(JetPoseError, ValueError):
    pass


class DegenerateLineError(JetPoseError, ValueError):
    """Epipolar line with vanishing normal (point at the epipole)."""


class SingularSystemError(JetPoseError, ValueError):
    pass


class InsufficientCorrespondencesError(JetPoseError, ValueError):
    pass


class NoConsensusError(JetPoseError):
    pass


class DegenerateMotionError(NoConsensusError):
    """Translation is unobservable (pure rotation or no motion).

    ``rotation`` holds the rotation-only estimate so callers can still
    report a rotation error.
    """

    def __init__(self, message, rotation=None, inliers=None):
        super().__init__(message)
        self.rotation = rotation
        self.inliers = inliers


class CheiralityError(JetPoseError):
    pass


class AllPointsCulledError(JetPoseError):
    pass


class IllConditionedError(JetPoseError):
    pass


class DatasetError(JetPoseError, ValueError):
    """Missing or malformed dataset files."""


class ZeroTranslationError(JetPoseError, ValueError):
    """Translation angle is undefined for a zero-length vector."""
