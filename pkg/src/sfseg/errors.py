"""Exception hierarchy shared by every sfseg module."""


class SfsegError(Exception):
    """Base class for all library errors."""


class FormatError(SfsegError):
    """A file does not follow the expected container or image format."""


class CorruptionError(SfsegError):
    """A file is structurally valid but its payload is truncated or damaged."""


class ValidationError(SfsegError):
    """A value violates a documented invariant (NaN, negative unary map, ...)."""


class ShapeError(SfsegError):
    """Volumes that must agree in shape do not."""


class ParameterError(SfsegError):
    """A numeric parameter is outside its admissible range."""


class DegenerateSolutionError(SfsegError):
    """The iterate collapsed to the zero vector."""


class CapacityError(SfsegError):
    """An explicit-matrix request exceeds the oracle size guard."""


class SpecError(SfsegError):
    """A synthetic instance description is inconsistent."""
