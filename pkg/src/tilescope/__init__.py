"""tilescope: multiscale tile classification for whole-slide images."""

__version__ = "0.1.0"

from .classes import CLASS_COLORS, CLASS_NAMES, NUM_CLASSES, class_index, class_name
from .errors import (
    DimensionMismatchError,
    FormatError,
    InputError,
    InsufficientDataError,
    InvalidSpecError,
    MissingLevelError,
    OutOfBoundsError,
    ShapeError,
    StateError,
    TileScopeError,
    UnbalanceableError,
)

__all__ = [
    "CLASS_COLORS",
    "CLASS_NAMES",
    "NUM_CLASSES",
    "class_index",
    "class_name",
    "TileScopeError",
    "InvalidSpecError",
    "FormatError",
    "MissingLevelError",
    "DimensionMismatchError",
    "OutOfBoundsError",
    "ShapeError",
    "StateError",
    "InputError",
    "InsufficientDataError",
    "UnbalanceableError",
    "__version__",
]
