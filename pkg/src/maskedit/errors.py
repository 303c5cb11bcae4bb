"""Exception types shared across the package."""


class MaskEditError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(MaskEditError):
    pass


class EmptySourceMask(MaskEditError):
    pass


class DegenerateShape(MaskEditError):
    pass


class MalformedRLE(MaskEditError):
    pass


class NoFreePlot(MaskEditError):
    pass


class UnknownToken(MaskEditError):
    pass


class AlignmentError(MaskEditError):
    pass


class NonFiniteActivation(MaskEditError):
    pass


class NonFiniteLoss(MaskEditError):
    pass


class StepOutOfRange(MaskEditError):
    pass


class ImageTooSmall(MaskEditError):
    pass


class EncoderMissing(MaskEditError):
    pass


class EmptyBenchmark(MaskEditError):
    pass


class ModelNotLoaded(MaskEditError):
    pass


class InvalidRequest(MaskEditError):
    pass


class MaskEmpty(MaskEditError):
    pass
