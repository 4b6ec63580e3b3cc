"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An input breaks a documented precondition (shape, symmetry, rank...)."""


class NumericalFailure(RuntimeError):
    """An iterative numerical routine failed to converge."""


class IngestionError(ValueError):
    """A data file could not be parsed into a dataset."""
