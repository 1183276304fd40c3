"""Exception types shared across the toolkit."""


class FreeflyerError(Exception):
    """Base class for all toolkit errors."""


class ContractViolationError(FreeflyerError, ValueError):
    """An argument violates a documented shape/range contract."""


class ConfigurationError(FreeflyerError, ValueError):
    """A configuration value is invalid or inconsistent (CLI exit code 2)."""


class ScenarioError(ConfigurationError):
    """A scenario or robot description file failed validation."""


class SingularityError(FreeflyerError):
    """Base pitch is within the guard band of the attitude singularity."""


class SolveFailureError(FreeflyerError):
    """The mass matrix was not positive definite at the query point."""


class NumericalOverflowError(FreeflyerError):
    """An integration step produced non-finite values."""


class DivergedRolloutError(FreeflyerError):
    """A shooting rollout left the representable range."""


class RiccatiSymmetryError(FreeflyerError):
    """Internal error: value-matrix symmetry drifted beyond tolerance."""


class NoPathError(FreeflyerError):
    """The planner exhausted its iteration budget without reaching the goal.

    Carries the search tree for post-mortem inspection.
    """

    def __init__(self, message, tree=None):
        super().__init__(message)
        self.tree = tree


class PhaseFailureError(FreeflyerError):
    """An assembly phase missed its completion criterion (CLI exit code 1)."""
