"""Exception types shared across the toolkit."""


class ToolkitError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(ToolkitError):
    """Malformed or truncated binary input (DICOM, NIfTI, checkpoint, manifest)."""


class UnsupportedError(ToolkitError):
    """Well-formed input that uses a feature outside the supported subset."""


class ConsistencyError(ToolkitError):
    """Mutually inconsistent inputs, e.g. mismatched slices in one series."""


class StateError(ToolkitError):
    """Operation applied to an object in the wrong state or mode."""


class ShapeError(ToolkitError):
    """Array shape incompatible with the requested operation."""


class ConfigError(ToolkitError):
    """Invalid or contradictory run configuration."""


class UndefinedMetricError(ToolkitError):
    """Metric whose denominator is zero; never silently reported as 0."""


class NumericError(ToolkitError):
    """Non-finite values where finite arithmetic is required."""
