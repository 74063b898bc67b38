class TwoViewError(Exception):
    """Base class for all library errors."""


class DegenerateError(TwoViewError, ValueError):
    """Input has no well-defined two-view geometry (zero baseline, rank loss, ...)."""


class NoParallaxError(DegenerateError):
    pass


class DegenerateSampleError(DegenerateError):
    """Raised by the minimal solver so that RANSAC can draw another sample."""


class EstimationError(TwoViewError):
    pass


class CheiralityError(EstimationError):
    pass


class FileFormatError(TwoViewError, ValueError):
    pass


class InsufficientLengthError(TwoViewError, ValueError):
    pass
