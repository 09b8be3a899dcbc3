"""
Error hierarchy shared by the library, the CLI and the HTTP routes.

Every error carries the process exit code the CLI reports for it:
  1 = usage / configuration error
  2 = data error (bad audio, bad checkpoint, bad manifest)
  3 = numeric failure (NaN loss abort)
"""


class ASTError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 2


class ConfigurationError(ASTError, ValueError):
    exit_code = 1


class ContractError(ASTError, ValueError):
    """A caller broke an operation precondition (e.g. non-scalar loss)."""

    exit_code = 1


class DimensionError(ASTError, ValueError):
    pass


class GeometryError(ASTError, ValueError):
    """Patch grid does not fit the spectrogram."""


class InputError(ASTError, ValueError):
    pass


class AdaptationError(ASTError, ValueError):
    pass


class AggregationError(ASTError, ValueError):
    pass


class ContainerError(ASTError, ValueError):
    pass


class NumericError(ASTError, ArithmeticError):
    exit_code = 3
