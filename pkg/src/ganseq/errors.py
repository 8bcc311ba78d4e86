"""Exception hierarchy shared by all pipeline stages."""


class GanseqError(Exception):
    """Base class for every error raised by this package."""


class InvalidLabelError(GanseqError, ValueError):
    pass


class MalformedTensorError(GanseqError, ValueError):
    pass


class OutOfBoundsError(GanseqError, ValueError):
    pass


class EmptyMaskError(GanseqError, ValueError):
    pass


class SceneTooSmallError(GanseqError, ValueError):
    pass


class ConfigError(GanseqError, ValueError):
    pass


class ContractError(GanseqError, ValueError):
    """Shapes, sizes or dimensions passed between components do not agree."""


class DatasetEmptyError(GanseqError, ValueError):
    pass


class TrainingDivergedError(GanseqError, RuntimeError):
    pass


class DegenerateShapeError(GanseqError, ValueError):
    """A generated silhouette has fewer set pixels than the configured minimum."""


class PlacementError(GanseqError, ValueError):
    pass


class CheckpointError(GanseqError, ValueError):
    pass


class ParseError(GanseqError, ValueError):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class RunError(GanseqError, RuntimeError):
    pass
