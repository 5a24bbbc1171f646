"""Exception hierarchy shared by every planttrack module."""


class PlantTrackError(Exception):
    """Base class for all errors raised by planttrack."""


class FormatError(PlantTrackError, ValueError):
    """A file does not follow the expected on-disk layout."""


class ValidationError(PlantTrackError, ValueError):
    """Inputs violate a documented precondition or invariant."""


class NumericalError(PlantTrackError, ArithmeticError):
    """A computation produced a non-finite value."""
