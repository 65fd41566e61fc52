"""Exception taxonomy for the package.

Every error raised on purpose derives from DeskLMError so callers (and the
CLI exit-code mapping) can tell deliberate contract failures apart from
plain bugs.
"""


class DeskLMError(Exception):
    """Base class for all deliberate errors raised by this package."""


class ConfigError(DeskLMError):
    """A configuration value is missing, malformed, or out of range."""


class ContractError(DeskLMError):
    """A function precondition was violated by the caller."""


class ShapeError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class IndexBoundsError(ContractError):
    """An integer index lies outside the valid range for a lookup."""


class DegenerateRowError(DeskLMError):
    """A softmax row had every entry masked out; the result is undefined."""


class IngestionError(DeskLMError):
    """The corpus could not be read or produced no usable tokens."""


class DivergenceError(DeskLMError):
    """Training produced a non-finite loss and was aborted."""


class CheckpointError(DeskLMError):
    """Base class for checkpoint read/write failures."""


class CheckpointFormatError(CheckpointError):
    """The file does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """The magic bytes are recognisable but the version is unsupported."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared payload was complete."""


class CheckpointShapeError(CheckpointError):
    """A stored tensor does not match the shape the model expects."""
