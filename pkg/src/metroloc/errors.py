"""Exception types raised across the toolkit.

Every error that callers are expected to catch has its own class so that
pipelines can distinguish recoverable per-frame failures (e.g. a frame
without usable rails) from hard input errors.
"""


class MetrolocError(Exception):
    """Base class for all toolkit errors."""


class InvalidParams(MetrolocError):
    """A configuration value is outside its documented range."""


class IoFailure(MetrolocError):
    """An OS-level read or write failed."""


class MissingFile(MetrolocError):
    """A file named by a manifest or CLI argument does not exist."""


class VersionMismatch(MetrolocError):
    """A dataset was written by an incompatible format version."""


class CorruptRecord(MetrolocError):
    """A serialized record failed to parse.

    Carries the offending file and record index when known.
    """

    def __init__(self, message, path=None, index=None):
        super().__init__(message)
        self.path = path
        self.index = index


class EmptyStream(MetrolocError):
    """An operation that needs samples received none."""


class NonMonotonicTime(MetrolocError):
    """Timestamps in a stream decreased or repeated."""


# Kept as an alias: stream loaders and the factor graph report the same
# defect under the name their callers expect.
NonMonotonicStamp = NonMonotonicTime


class TimestampMismatch(MetrolocError):
    """Two objects that must share a time base disagree."""


class InsufficientImuCoverage(MetrolocError):
    """IMU samples do not span the interval being integrated."""


class CoverageGap(MetrolocError):
    """A sensor stream has a hole larger than the configured tolerance."""


class DegenerateDirection(MetrolocError):
    """A direction vector is too short to normalize."""


class DegenerateSpread(MetrolocError):
    """Points are too concentrated (or collinear) for the requested fit."""


class NoBedPoints(MetrolocError):
    """Too few returns in the track-bed height band."""


class NoRailsFound(MetrolocError):
    """Rail extraction could not establish a supported line on each side."""


class AsymmetricRails(MetrolocError):
    """The recovered rail pair deviates too far from the configured gauge."""


class InsufficientCorrespondences(MetrolocError):
    """Scan-to-map association produced fewer constraints than unknowns."""


class BehindCamera(MetrolocError):
    """A landmark projected with non-positive depth."""


class DegenerateProjection(MetrolocError):
    """A projection or triangulation problem is rank deficient."""


class InsufficientParallax(MetrolocError):
    """Observation rays are too close to parallel to triangulate."""


class InsufficientConstraints(MetrolocError):
    """A solve was requested with too few factors to determine the state."""


class UnknownNode(MetrolocError):
    """A factor references a node that is not in the graph."""


class NoOverlap(MetrolocError):
    """Two trajectories share no associable timestamps."""
