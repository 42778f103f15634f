"""Exception types shared across the package."""


class PolyRobustError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PolyRobustError, ValueError):
    """Inconsistent shapes between matrices, vectors or variable blocks."""


class DomainError(PolyRobustError, ValueError):
    """A scalar argument lies outside its admissible range."""


class MembershipError(PolyRobustError, ValueError):
    """A vector or matrix pair does not belong to the required set."""


class SolverError(PolyRobustError, RuntimeError):
    """The conic backend did not return a usable optimal solution.

    Parameters
    ----------
    message : str
        Human readable description.
    status : str
        Status reported by :func:`polyrobust.conic.solve`.
    """

    def __init__(self, message, status="numerical-failure"):
        super().__init__(f"{message} (status={status})")
        self.status = status


class UnboundedError(SolverError):
    """A maximization that should be bounded turned out unbounded."""

    def __init__(self, message):
        super().__init__(message, status="unbounded")


class InfeasibleError(SolverError):
    """A program that must be feasible was certified infeasible."""

    def __init__(self, message):
        super().__init__(message, status="infeasible")


class DecompositionError(PolyRobustError, RuntimeError):
    """Randomized rank-one decomposition failed to meet its budget."""

    def __init__(self, message, best_budget=None, claimed_budget=None):
        super().__init__(message)
        self.best_budget = best_budget
        self.claimed_budget = claimed_budget
