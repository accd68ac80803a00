"""Exception types shared across the package."""


class DynSDPBError(Exception):
    pass


class DimensionError(DynSDPBError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(DynSDPBError, ValueError):
    pass


class ValidationError(DynSDPBError, ValueError):
    """Input fails a numerical precondition (e.g. a row that is not a distribution)."""


class ContractError(DynSDPBError, RuntimeError):
    pass


class StateError(DynSDPBError, RuntimeError):
    pass


class AlignmentError(DynSDPBError, KeyError):
    """Cached entries do not line up with the current batch."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConfigError(DynSDPBError, ValueError):
    pass


class DegenerateInputError(ValidationError):
    """Input has no content to summarize (e.g. an empty generation)."""
