"""Exception types raised across the package.

Every error that callers are expected to catch derives from RollError so
that the CLI can map failures onto stable exit codes.
"""


class RollError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RollError):
    """Invalid configuration value or malformed config file."""


class DegenerateRotation(RollError):
    """Rotation too close to the 180 degree singularity for a stable log."""


class InvalidParameter(RollError):
    """Parameter outside its documented domain (e.g. non-positive leaf)."""


class EmptyIndex(RollError):
    """Spatial index built over, or queried with, zero points."""


class MalformedScan(RollError):
    """Scan violates the ring ordering contract or its file is corrupt."""


class NoNearbyKeyframes(RollError):
    """No keyframe observation pose within the local-map radius."""


class CorruptMap(RollError):
    """Map file failed validation; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DegenerateCorrespondence(RollError):
    """Correspondence geometry is degenerate (coincident or collinear points)."""


class InsufficientCorrespondences(RollError):
    """Too few valid correspondences to run scan-to-map optimization."""


class NumericalFailure(RollError):
    """Non-finite values encountered inside an optimizer."""


class NoAnchor(RollError):
    """Fusion window holds no global-matching pose to anchor the solve."""


class NoOverlap(RollError):
    """No pair of trajectory samples associates within the time window."""


class EmptySeries(RollError):
    """Summary statistics requested over an empty error series."""
