"""Exception taxonomy shared across the package.

The command line maps these onto exit codes: configuration and usage
problems exit 2, data and file-format problems exit 3, numeric
divergence exits 4.
"""


class ConfigurationError(ValueError):
    """A shape, hyperparameter, or wiring request that can never be valid."""


class FormatError(ValueError):
    """A file that does not parse as the format it claims to be."""


class IncompatibilityError(FormatError):
    """A weight file whose architecture digest does not match the target."""


class DataError(ValueError):
    """Well-formed container, invalid payload (labels out of range etc.)."""


class NumericError(ArithmeticError):
    """NaN or Inf escaped an operation that promises finite outputs."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
