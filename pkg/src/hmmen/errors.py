"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class DataError(Exception):
    """Dataset on disk is malformed or incomplete."""


class NumericError(Exception):
    """A numeric failure (NaN loss/gradient) occurred during optimization."""
