class CTPhaseError(Exception):
    """Base class for data errors raised by this package."""


class VolumeIOError(CTPhaseError):
    pass


class GridMismatchError(CTPhaseError):
    pass


class FeatureError(CTPhaseError):
    pass


class ModelFormatError(CTPhaseError):
    pass


class TrainingError(CTPhaseError):
    pass
