"""Exception hierarchy shared by all stgcl modules."""


class StgclError(Exception):
    """Base class for library errors."""


class ContractViolation(StgclError):
    """An operation was called with arguments that violate its contract."""


class DegenerateInputError(ContractViolation):
    """Input is mathematically degenerate (e.g. a zero-norm vector)."""


class NumericError(StgclError):
    """A numeric failure (NaN/inf) was produced by a named operation."""

    def __init__(self, op: str, message: str = ""):
        self.op = op
        super().__init__(f"numeric failure in '{op}'" + (f": {message}" if message else ""))


class DataError(StgclError):
    """A dataset file is missing, corrupt, or inconsistent."""
