"""Exception types raised by corrdiff."""


class CorrDiffError(Exception):
    """Base class for all corrdiff errors."""


class ValidationError(CorrDiffError, ValueError):
    """Input data violates a structural invariant."""


class NonTriangularLength(ValidationError):
    pass


class NonPositiveDiagonal(ValidationError):
    pass


class OutOfDomain(ValidationError):
    pass


class EmptyGroup(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidCorrelationMatrix(ValidationError):
    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        self.detail = detail
        msg = f"invariant '{invariant}' violated"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class NumericalError(CorrDiffError, ArithmeticError):
    """A numerical or optimization step failed."""


class EntryOutOfRange(NumericalError):
    pass


class QuotientPole(NumericalError):
    pass


class ZeroAlpha(NumericalError):
    pass


class DegenerateWeights(NumericalError):
    pass


class NotIdentifiable(NumericalError):
    pass


class SingularBread(NumericalError):
    def __init__(self, msg, condition=float("inf")):
        self.condition = condition
        super().__init__(msg)


class FoldFailure(NumericalError):
    def __init__(self, msg, failed_folds=()):
        self.failed_folds = tuple(failed_folds)
        super().__init__(msg)


class ReplicateFailure(NumericalError):
    pass
