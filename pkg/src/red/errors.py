"""Exception taxonomy shared by all red modules."""


class RedError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(RedError):
    """Model file has a bad magic number or an unsupported version."""


class ValidationError(RedError):
    """Model structure violates an invariant (shapes, offsets, compatibility)."""


class DataError(RedError):
    """Tensor payload contains non-finite values."""


class EvaluationError(RedError):
    """Forward evaluation failed (shape mismatch, incompatible models)."""


class StructureError(RedError):
    """A graph rewrite cannot be applied to this topology."""


class EstimationError(RedError):
    """Density/extrema estimation produced an unusable result."""


class DegenerateDistribution(RedError):
    """All values identical; bandwidth and KDE are undefined."""


class InseparableChannel(RedError):
    """A channel's filters are not scalar multiples of a small basis."""
