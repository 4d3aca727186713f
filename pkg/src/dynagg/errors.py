"""Exception types shared across the package."""


class DynaggError(Exception):
    """Base class for all library errors."""

    kind = "error"


class DimensionError(DynaggError, ValueError):
    kind = "dimension"


class DomainError(DynaggError, ValueError):
    kind = "domain"


class DegenerateInputError(DynaggError, ValueError):
    kind = "degenerate"


class SpecError(DynaggError, ValueError):
    """A clip or dataset specification cannot be realised."""

    kind = "spec"


class CheckpointError(DynaggError):
    kind = "checkpoint"


class TrainingError(DynaggError, RuntimeError):
    kind = "training"
