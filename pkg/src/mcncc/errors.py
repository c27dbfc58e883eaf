"""Exception hierarchy shared across the package."""


class McnccError(Exception):
    """Base class for all errors raised by this package."""


class BoundsError(McnccError):
    """A window, region, or index falls outside the map bounds."""


class DegenerateRegionError(McnccError):
    """Support region has fewer than two pixels; statistics are undefined."""


class DimensionMismatchError(McnccError):
    """Operands disagree in channel count or spatial geometry."""


class ConfigurationError(McnccError):
    """An operation was invoked with missing or inconsistent configuration."""


class NumericalError(McnccError):
    """A numerical routine failed (singular matrix, non-convergence)."""


class EmptySearchError(McnccError):
    """Alignment search found no admissible pose."""


class TrainingDivergedError(McnccError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class TensorFormatError(McnccError):
    """Binary tensor file is malformed."""


class ManifestError(McnccError):
    """Dataset manifest failed validation."""


class ProtocolError(McnccError):
    """An evaluation protocol received degenerate input."""


class DatabaseItemError(McnccError):
    """Scoring one database item failed; carries the item index."""

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index
