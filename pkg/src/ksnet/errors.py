"""Typed errors raised across the library.

Every failure mode the library can diagnose maps to one of these, so callers
(and the CLI) can distinguish bad shapes from bad files from bad arguments.
"""


class KsnetError(Exception):
    """Base class for all library errors."""


class DimensionError(KsnetError):
    """Tensor shapes are incompatible with the requested operation."""


class ParameterError(KsnetError):
    """An argument is outside its legal range (delta, dropout rate, bins...)."""


class ContractError(KsnetError):
    """An internal precondition was violated (non-scalar loss, missing grads,
    non-positive sigma)."""


class DataError(KsnetError):
    """Input data is malformed (labels out of range, bad probability rows,
    empty prediction sets)."""


class FormatError(KsnetError):
    """A binary dataset file does not match its declared format.

    Carries the byte offset at which decoding failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(KsnetError):
    """A checkpoint file is corrupt, truncated, or incompatible."""


class ModeError(KsnetError):
    """The requested inference protocol does not apply to this model."""


class ConfigError(KsnetError):
    """A run configuration is invalid; the message names the offending field."""
