"""Exception types shared across the library."""


class CorrposeError(Exception):
    """Base class for all library errors."""


class InvalidParameterError(CorrposeError):
    """A parameter violates a documented precondition (e.g. scale <= 0)."""


class BehindCameraError(CorrposeError):
    """A 3D point or object lies at or behind the camera plane."""


class InsufficientDataError(CorrposeError):
    """Too few points/pairs/templates to perform the operation."""


class DegenerateError(CorrposeError):
    """Degenerate geometric configuration (coincident/collinear points, empty render)."""


class NoModelError(CorrposeError):
    """Robust fit found no consensus above the configured inlier floor."""


class NoPoseError(CorrposeError):
    """No pose hypothesis reached the minimum inlier support."""


class EmptyForegroundError(CorrposeError):
    """An observation feature map has no foreground patches."""


class FormatError(CorrposeError):
    """A binary/container file does not match its declared format.

    Carries the byte offset at which the mismatch was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionMismatchError(CorrposeError):
    """Operands disagree on a shared dimension (feature dim, grid shape)."""
