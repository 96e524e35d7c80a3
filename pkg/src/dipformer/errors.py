"""Exception types raised across the package."""


class DipformerError(Exception):
    """Base class for all package errors."""


class DimensionError(DipformerError, ValueError):
    """Operand shapes are incompatible."""


class GeometryError(DipformerError, ValueError):
    """Spatial sizes do not satisfy an op's resolution constraints."""


class ConfigError(DipformerError, ValueError):
    """A configuration or parameter record is invalid."""


class UsageError(DipformerError, RuntimeError):
    """An API was called in a state it does not support."""


class FormatError(DipformerError, ValueError):
    """A checkpoint or serialized record is corrupt."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(DipformerError, ValueError):
    """Input images or label masks are unusable."""


class UndefinedRecallError(DataError):
    """Ground truth contains no positive pixels, so recall is undefined."""


class DegenerateBatchError(DataError):
    """Every pixel in a batch carries the ignore label."""


class TrainingDivergedError(DipformerError, FloatingPointError):
    """The training loss became non-finite."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path
