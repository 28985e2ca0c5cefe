"""Exception hierarchy shared by all modules."""

__all__ = [
    "VaristepError",
    "DegenerateElement",
    "Infeasible",
    "LineSearchStall",
    "NonFiniteGradient",
    "SingularSystem",
    "MarkerEscaped",
    "SchemeStop",
    "CollisionStop",
    "DetDriftStop",
    "SchemaMismatch",
    "InequalityViolation",
    "ValidationError",
]


class VaristepError(Exception):
    """Base class for every error raised by the package."""


class DegenerateElement(VaristepError):
    """An element quad has non-positive signed area."""


class Infeasible(VaristepError):
    """A derivative was requested at a point of infinite energy."""


class LineSearchStall(VaristepError):
    """Backtracking failed to produce any finite trial value."""


class NonFiniteGradient(VaristepError):
    """The objective gradient contains NaN or inf at a finite point."""


class SingularSystem(VaristepError):
    """A linear saddle-point system could not be solved."""


class MarkerEscaped(VaristepError):
    """A flow-map marker left the container by more than one cell."""


class SchemeStop(VaristepError):
    """Regular termination of a time loop before ``T_end``.

    Parameters
    ----------
    reason : str
        Short machine-readable reason.
    time : float
        Time of the last accepted state.
    """

    def __init__(self, reason, time, message=""):
        self.reason = reason
        self.time = float(time)
        super().__init__(message or f"{reason} at t={self.time:.6g}")


class CollisionStop(SchemeStop):
    """Boundary contact or loss of injectivity."""

    def __init__(self, time, message=""):
        super().__init__("collision", time, message)


class DetDriftStop(SchemeStop):
    """Flow-map Jacobian determinant left [1/2, 2]."""

    def __init__(self, time, message=""):
        super().__init__("det_drift", time, message)


class SchemaMismatch(VaristepError):
    """A ledger file does not carry the expected columns."""


class InequalityViolation(VaristepError):
    """A discrete energy inequality failed beyond its tolerance."""


class ValidationError(VaristepError):
    """Configuration errors; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
