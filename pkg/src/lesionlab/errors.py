"""Exception taxonomy shared across the package.

Every error raised by lesionlab derives from :class:`LesionLabError`; the
``category`` attribute is what the CLI maps onto exit codes.
"""


class LesionLabError(Exception):
    """Base class for all package errors."""

    category = "runtime"


class ConfigError(LesionLabError):
    """Invalid configuration value or malformed config structure."""

    category = "config"


class DimensionError(LesionLabError):
    """Operand shapes are inconsistent with the requested operation."""

    category = "dimension"


class UsageError(LesionLabError):
    """Operation invoked outside its contract (bad argument, empty input)."""

    category = "usage"


class DataFormatError(LesionLabError):
    """On-disk artifact is missing, truncated, or self-inconsistent."""

    category = "data-format"


class TrainingDiverged(LesionLabError):
    """A training step produced a non-finite loss."""

    category = "training"


class PlacementFailure(LesionLabError):
    """Rejection sampling could not place a lesion within its constraints."""

    category = "placement"


class DegenerateResult(LesionLabError):
    """A geometric operation produced an empty result."""

    category = "degenerate"


class ContainmentError(LesionLabError):
    """An implant spec does not fit the slice it is applied to."""

    category = "containment"
