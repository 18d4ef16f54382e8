"""Exception hierarchy shared across the package."""


class DtaError(Exception):
    """Base class for all package errors."""


class ShapeError(DtaError):
    """Operand dimensions are inconsistent."""


class ConfigError(DtaError):
    """Invalid configuration value or combination."""


class TrainingError(DtaError):
    """Non-finite loss or gradient encountered during training."""


class FitError(DtaError):
    """An outcome-model fit failed (non-convergence, degenerate weights)."""


class NumericalError(DtaError):
    """A linear system stayed singular after regularization."""


class FormatError(DtaError):
    """Unrecognized or inconsistent file format."""


class ParseError(FormatError):
    """Malformed record in a data file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
