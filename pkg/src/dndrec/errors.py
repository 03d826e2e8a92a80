"""Exception hierarchy shared by every stage of the pipeline."""


class DndError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(DndError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(DndError, ValueError):
    """A configuration value is missing, unknown or out of range."""


class ContractError(DndError, ValueError):
    """An operation was called outside its precondition."""


class NonFiniteError(DndError, FloatingPointError):
    """A NaN or infinity appeared in tensor data."""


class IngestionError(DndError):
    """Raw event file could not be read or produced no valid rows."""


class PreprocessingError(DndError):
    """Filtering or splitting left an empty corpus or split."""


class TrainingAbort(DndError):
    """Training hit a non-finite loss or gradient."""


class UnsupportedDecoderError(DndError):
    """The decoder cannot be served through a precomputed candidate index."""


class StaleIndexError(DndError):
    """A candidate index was built from a different model."""


class FormatError(DndError, ValueError):
    """A container file has the wrong magic string or a corrupt header."""
