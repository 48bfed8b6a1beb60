"""Exception types raised by weakgeo.

Conditions that the API *reports* instead of raising (non-differentiable
points, degenerate GIoU inputs, label lint findings) are plain strings
listed in :data:`REPORT_CODES`.
"""


class WeakGeoError(Exception):
    """Base class for all library errors."""


class NonPositiveDepth(WeakGeoError):
    """A point to be projected lies on or behind the camera plane."""


class DegenerateHeading(WeakGeoError):
    """A transformed heading has (almost) no extent in the XZ plane."""


class HorizonDegenerate(WeakGeoError):
    """A direction-label endpoint sits on the horizon row ``v == o_y``."""


class ZeroLengthDirection(WeakGeoError):
    """A direction vector has zero length."""


class NoLabels(WeakGeoError):
    """A fit was requested for an observation without any 2D box label."""


class AllStartsDiverged(WeakGeoError):
    """Every multi-start produced a non-finite loss."""


class UnprojectableTarget(WeakGeoError):
    """Scene synthesis could not place a target in front of both cameras."""


class MalformedCalib(WeakGeoError):
    """A KITTI calibration file is missing a line or has a bad value count."""


class MalformedLabel(WeakGeoError):
    """A KITTI label line does not have 15 fields."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DontCareLabel(WeakGeoError):
    """A ``DontCare`` KITTI entry has no 3D box."""


class IdMismatch(WeakGeoError):
    """Ground-truth and fitted lists are not aligned by track id."""


REPORT_CODES = (
    "HorizonDegenerate",
    "ZeroLengthDirection",
    "NonDifferentiablePoint",
    "DegenerateBoxes",
)
