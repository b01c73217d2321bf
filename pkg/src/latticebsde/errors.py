"""Exception hierarchy.

Errors that signal bad input (a malformed basis, an oversized tree, a
belief on the simplex boundary, ...) derive from :class:`ValidationError`;
errors raised while computing derive from :class:`NumericalError`. The CLI
maps the two families to different exit codes.
"""


class LatticeBSDEError(Exception):
    """Base class for every error raised by the package."""


class ValidationError(LatticeBSDEError, ValueError):
    pass


class NumericalError(LatticeBSDEError, ArithmeticError):
    pass


class SingularBasis(ValidationError):
    pass


class NotPositiveDefinite(ValidationError):
    pass


class TreeTooLarge(ValidationError):
    pass


class NonEquivalent(ValidationError):
    pass


class DepthMismatch(ValidationError):
    pass


class BeliefNotInterior(ValidationError):
    pass


class EmptySet(ValidationError):
    pass


class NotConcave(ValidationError):
    pass


class SlopeOutsideTheta(ValidationError):
    pass


class PreconditionUnverifiable(ValidationError):
    pass


class UnreachablePoint(ValidationError):
    pass


class ConfigInvalid(ValidationError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class OptimizerFailed(NumericalError):
    pass


class InconsistentExpectation(NumericalError):
    pass


class DriverEvaluationFailed(NumericalError):
    pass


class PenaltyDiverged(NumericalError):
    pass


class NoArgmax(NumericalError):
    pass


class NoRoot(NumericalError):
    pass
