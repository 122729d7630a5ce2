"""Exception hierarchy for the kam package.

Each error carries the process exit code the CLI returns for it:
1 for usage problems, 2 when an inequality of the scheme is unmet,
3 for numerical failures.
"""


class KamError(Exception):
    exit_code = 3


### Usage ###

class UsageError(KamError):
    exit_code = 1


class ConfigError(UsageError):
    pass


### Conditions of the scheme (exit 2) ###

class ConditionError(KamError):
    """An inequality required by the scheme does not hold with measured values"""
    exit_code = 2

    def __init__(self, message, condition=None, measured=None, threshold=None):
        super().__init__(message)
        self.condition = condition
        self.measured = measured
        self.threshold = threshold


class ResonanceError(ConditionError):
    pass


class ConditionUnsatisfiableError(ConditionError):
    pass


class ScheduleError(ConditionError):
    pass


class Q0TooSmallError(ConditionError):
    pass


class StepConditionError(ConditionError):
    pass


class FlowDomainError(ConditionError):
    pass


class InversionPreconditionError(ConditionError):
    pass


class EnvelopeError(ConditionError):
    pass


class NondegeneracyError(ConditionError):
    pass


class EpsilonTooLargeError(ConditionError):
    pass


### Numerical failures (exit 3) ###

class NumericalError(KamError):
    exit_code = 3


class EnumerationBudgetError(NumericalError):
    pass


class TableTooSmallError(NumericalError):
    pass


class DomainError(NumericalError):
    pass


class BudgetError(NumericalError):
    def __init__(self, message, best_determinant=None):
        super().__init__(message)
        self.best_determinant = best_determinant


class HomologicalPreconditionError(NumericalError):
    def __init__(self, message, mode=None):
        super().__init__(message)
        self.mode = mode


class TruncationBudgetError(NumericalError):
    pass


class InversionError(NumericalError):
    pass


class CompositionDomainError(NumericalError):
    pass


class PlacementError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class RealityError(NumericalError):
    pass


def at_iteration(error, i):
    """Re-raise helper: prefix the message of a KamError with the iteration index"""
    error.args = (f'iteration {i}: {error.args[0] if error.args else ""}',) + tuple(error.args[1:])
    return error
