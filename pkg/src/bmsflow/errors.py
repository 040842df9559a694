"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`BMSFlowError`, and the
class name doubles as the machine-readable error tag emitted by the CLI.
Errors that signal bad input also derive from :class:`ValueError`.
"""


class BMSFlowError(Exception):
    """Base class for all toolkit errors."""

    #: CLI exit code associated with this error family.
    exit_code = 3

    @property
    def tag(self) -> str:
        return type(self).__name__


class ValidationError(BMSFlowError, ValueError):
    """Input failed validation (parameters, configuration, domains)."""

    exit_code = 2


class InvalidParams(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class OmegaOutOfDomain(ValidationError):
    pass


class DiscriminantNegative(BMSFlowError, ValueError):
    pass


class OutOfBasin(BMSFlowError, ValueError):
    pass


class NonFinite(BMSFlowError, ArithmeticError):
    pass


class BudgetExceeded(BMSFlowError):
    pass


class SingularLinearization(BMSFlowError, ArithmeticError):
    pass


class NoContraction(BMSFlowError):
    pass


class MaxItersExceeded(BMSFlowError):
    pass


class NewtonDiverged(BMSFlowError):
    pass


class SingularJacobian(BMSFlowError, ArithmeticError):
    pass


class NoConvergence(BMSFlowError):
    pass


class DegenerateSpectrum(BMSFlowError):
    pass


class MarginalEigenvalue(BMSFlowError):
    pass


class UnstablePotential(BMSFlowError):
    pass


class QuadratureOverflow(BMSFlowError, ArithmeticError):
    pass


class BracketInvalid(BMSFlowError, ValueError):
    pass


class SweepFailed(BMSFlowError):
    """Every point of a parameter sweep failed."""
