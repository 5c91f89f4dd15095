"""Exception types raised across the package."""


class FbcpError(Exception):
    """Base class for all package errors."""


class InvalidInput(FbcpError, ValueError):
    """An argument violates a documented precondition."""


class PreconditionError(InvalidInput):
    """A statistical precondition does not hold.

    ``minimum`` carries the smallest admissible value when one exists
    (e.g. the calibration size needed by :func:`fbcp.conformal.expected_beta_bound`).
    """

    def __init__(self, message, minimum=None):
        super().__init__(message)
        self.minimum = minimum


class SingularFit(FbcpError):
    """The regression design is rank deficient and no ridge was given."""


class SplitViolation(FbcpError):
    """Trajectories from two splits that must be disjoint overlap."""


class Infeasible(FbcpError):
    """The lower-stage problem has no feasible plan (or a radius is infinite)."""


class SolverDiverged(FbcpError):
    """The optimizer produced non-finite iterates."""


class BudgetExhausted(FbcpError):
    """Realized posterior risks consumed the whole risk budget."""


class InvariantViolation(FbcpError):
    """An internal invariant failed; signals a broken upstream precondition."""


class NoActiveConstraints(FbcpError):
    """IRA found no active constraint to relax."""
