"""Exception types raised across the package."""


class PhenofactorError(Exception):
    """Base class for all package errors."""


class EmptyMask(PhenofactorError):
    pass


class DimensionMismatch(PhenofactorError):
    pass


class MissingLandmarks(PhenofactorError):
    pass


class ImageTooSmall(PhenofactorError):
    pass


class EmbedderDimensionMismatch(PhenofactorError):
    pass


class ShapeMismatch(PhenofactorError):
    pass


class SingleClassDataset(PhenofactorError):
    pass


class EmptyDataset(PhenofactorError):
    pass


class UnsupportedResolution(PhenofactorError):
    pass


class DegenerateLandmarks(PhenofactorError):
    pass


class EmptyManifest(PhenofactorError):
    pass


class BatchTooLarge(PhenofactorError):
    pass


class UnknownAttribute(PhenofactorError, KeyError):
    pass


class LengthMismatch(PhenofactorError):
    pass


class StageMismatch(PhenofactorError):
    pass


class MissingCheckpoint(PhenofactorError):
    pass


class NonFiniteLoss(PhenofactorError):
    pass


class DegenerateInput(PhenofactorError):
    pass


class InsufficientImages(PhenofactorError):
    pass
