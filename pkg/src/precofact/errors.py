"""Exception types shared across the engine."""


class PrecofactError(Exception):
    """Base class for all engine errors."""


class DimensionError(PrecofactError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(PrecofactError):
    """A tensor acquired NaN or Inf values."""


class ContractError(PrecofactError):
    """An operation precondition was violated."""


class InvalidMaskError(PrecofactError):
    """A mask leaves no valid entries to operate on."""


class InvalidInputError(PrecofactError):
    """A sequence or sample fails its structural invariants."""


class ConfigError(PrecofactError):
    """A configuration value or file is invalid."""


class DatasetFormatError(PrecofactError):
    """A binary file violates its format contract.

    ``category`` is a short machine-readable tag (e.g. ``bad-magic``,
    ``truncated-record``); ``detail`` is the human explanation.
    """

    def __init__(self, category: str, detail: str):
        super().__init__(f"{category}: {detail}")
        self.category = category
        self.detail = detail


class JoinError(PrecofactError):
    """Prediction sets disagree on the sample-id set."""


class TrainingAborted(PrecofactError):
    """Training stopped on a fatal numeric condition."""
