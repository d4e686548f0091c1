"""Exception types shared across the package."""


class DdromError(Exception):
    """Base class for all package errors."""


class DimensionError(DdromError, ValueError):
    """An operand has the wrong shape.

    The offending operand is named in ``operand`` so callers can report it.
    """

    def __init__(self, operand, expected, got):
        self.operand = operand
        self.expected = expected
        self.got = got
        super().__init__(f"{operand}: expected shape {expected}, got {got}")


class ConfigError(DdromError, ValueError):
    pass


class SolverError(DdromError, RuntimeError):
    """The conic backend failed; ``residuals`` holds whatever it reported."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals or {}


class CertificateError(DdromError, RuntimeError):
    pass
