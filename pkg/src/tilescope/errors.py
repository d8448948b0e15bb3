"""Exception hierarchy shared across the package."""


class TileScopeError(Exception):
    """Base class for all tilescope errors."""


class InvalidSpecError(TileScopeError):
    """A generation or extraction spec violates its invariants."""


class FormatError(TileScopeError):
    """A serialized artifact failed magic/version/shape validation."""


class MissingLevelError(FormatError):
    """A pyramid directory lacks one of the required levels."""


class DimensionMismatchError(FormatError):
    """Manifest dimensions disagree with the stored raster."""


class OutOfBoundsError(TileScopeError):
    """A coordinate falls outside the slide bounds."""


class ShapeError(TileScopeError):
    """A tensor does not have the shape an operation requires."""


class StateError(TileScopeError):
    """An operation was invoked without its required prior state."""


class InputError(TileScopeError):
    """A model input is missing a required component."""


class InsufficientDataError(TileScopeError):
    """A dataset partition is empty where data is required."""


class UnbalanceableError(TileScopeError):
    """A class has no tiles, so augmentation cannot balance it."""
