"""Exception hierarchy shared by all modules."""


class RickerError(Exception):
    """Base class for package errors."""


class DomainError(RickerError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class OrbitDivergenceError(RickerError, ArithmeticError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"orbit became non-finite at step {step}")


class InvasibilityError(RickerError, ValueError):
    """Mutual invasibility (ab < 1 plus both invasion inequalities) does not hold."""


class ResolutionError(RickerError):
    """A truncated pmf needs more support than the configured budget."""


class CapTooSmallError(RickerError):
    def __init__(self, worst_state, overflow, budget):
        self.worst_state = worst_state
        self.overflow = overflow
        self.budget = budget
        super().__init__(
            f"overflow leak {overflow:.3e} at state {worst_state} exceeds budget {budget:.1e}"
        )


class NonConvergenceError(RickerError):
    def __init__(self, message, residual=None, iterations=None):
        self.residual = residual
        self.iterations = iterations
        super().__init__(message)


class InfeasibleError(RickerError):
    """Instance too large for every available method."""


class NotApplicableError(DomainError):
    """Method preconditions fail (e.g. AR approximation at a non-attracting point)."""
