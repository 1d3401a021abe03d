"""Exception hierarchy.

Every error raised on bad *data* derives from :class:`CanopyError`, which the
command line maps to exit status 1.
"""


class CanopyError(Exception):
    """Base class for data errors raised by canopy_miner."""


class InvariantViolation(CanopyError, ValueError):
    """A value breaks the invariant of the type it was meant to build."""


class ParseError(CanopyError, ValueError):
    """Malformed input file (bad header, wrong column count, non-numeric)."""


class IoError(CanopyError, OSError):
    """A file could not be read or written."""


class OutOfBounds(CanopyError, IndexError):
    """A coordinate falls outside a raster grid."""

    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class ShapeMismatch(CanopyError, ValueError):
    """Two arrays that must align have different shapes."""


class GridMismatch(CanopyError, ValueError):
    """Rasters do not share the same world transform."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = tuple(fields)


class BandMismatch(CanopyError, ValueError):
    """Raster band count differs from what the caller expects."""


class LengthMismatch(CanopyError, ValueError):
    """Paired sequences have different lengths."""


class DegenerateInput(CanopyError, ValueError):
    """Input too small or degenerate for the requested operation."""


class NonConvergence(CanopyError, RuntimeError):
    """An iterative solver ran out of iterations."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DuplicateId(CanopyError, ValueError):
    """An identifier that must be unique appears more than once."""


class InvalidFraction(CanopyError, ValueError):
    """A fraction parameter is outside the open interval (0, 1)."""


class ConfigError(CanopyError, ValueError):
    """Pipeline configuration is invalid."""
