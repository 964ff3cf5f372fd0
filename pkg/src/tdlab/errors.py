"""Exception hierarchy.

Two families matter to callers: ``ValidationError`` for bad inputs (the CLI
exits with status 1) and ``ComputationError`` for failures discovered while
computing (status 2).
"""


class TDLabError(Exception):
    pass


class ValidationError(TDLabError, ValueError):
    pass


class ComputationError(TDLabError, ArithmeticError):
    pass


class InvalidMRP(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class NotIrreducible(ValidationError):
    pass


class NotAperiodic(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class RankDeficientFeatures(ValidationError):
    pass


class TruncationTooSmall(ValidationError):
    pass


class InadmissibleStepSize(ValidationError):
    pass


class AlphaOutOfRange(ValidationError):
    pass


class DenominatorNonPositive(ValidationError):
    pass


class EpochBufferIncomplete(ValidationError):
    pass


class SolverFailure(ComputationError):
    pass


class SingularSystem(ComputationError):
    pass


class MaxIterExceeded(ComputationError):
    pass


class RankDeficientAfterRetries(ComputationError):
    pass


class NonFiniteIterate(ComputationError):
    def __init__(self, iteration, message=None):
        self.iteration = iteration
        super().__init__(message or f"iterate became non-finite by iteration {iteration}")


class RunFailure(ComputationError):
    """Raised by the harness when a run fails; carries the run index."""

    def __init__(self, algorithm, run_index, cause):
        self.algorithm = algorithm
        self.run_index = run_index
        self.cause = cause
        super().__init__(f"{algorithm} run {run_index}: {cause}")
