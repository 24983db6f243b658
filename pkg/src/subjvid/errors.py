"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidPose(ValueError):
    pass


class ShapeError(ValueError):
    pass


class AlignmentError(ValueError):
    """Control and noise streams disagree on temporal length."""


class NumericError(FloatingPointError):
    pass


class InvalidRecord(ValueError):
    pass


class EmissionError(RuntimeError):
    pass
