"""Exception types raised across the package."""


class RdimKDError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(RdimKDError, ValueError):
    pass


class InvalidDims(RdimKDError, ValueError):
    pass


class RankDeficient(RdimKDError, ValueError):
    """A Gram-Schmidt pivot fell below the rank tolerance."""


class NotSymmetric(RdimKDError, ValueError):
    pass


class NoConvergence(RdimKDError, RuntimeError):
    pass


class TooFewSamples(RdimKDError, ValueError):
    pass


class NotOrthonormal(RdimKDError, ValueError):
    pass


class NotNormalized(RdimKDError, ValueError):
    pass


class LengthMismatch(RdimKDError, ValueError):
    pass


class MaskLengthMismatch(RdimKDError, ValueError):
    pass


class EpochOutOfRange(RdimKDError, ValueError):
    pass


class Diverged(RdimKDError, RuntimeError):
    """Training or fitting blew up (NaN or runaway objective)."""


class DimensionMismatch(RdimKDError, ValueError):
    pass


class ParseError(RdimKDError, ValueError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)


class ValidationError(RdimKDError, ValueError):
    pass
