"""Exception types shared across the toolkit."""


class DiarkitError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(DiarkitError):
    """An operation received data that violates its preconditions."""


class FormatError(DiarkitError):
    """An input file does not match its declared format."""


class TrainingDivergedError(DiarkitError):
    """The training loss became non-finite."""
