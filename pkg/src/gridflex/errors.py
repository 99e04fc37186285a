"""Exception hierarchy shared across the package."""


class GridflexError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(GridflexError, ValueError):
    """Invalid value: non-finite input, bound violation, bad parameter."""


class GridMismatchError(ValidationError):
    """Trajectories defined on incompatible time grids."""


class UnitMismatchError(ValidationError):
    """Trajectory carries the wrong unit tag for the operation."""


class InfeasibleScenarioError(GridflexError):
    """Balance cannot be met at some time steps.

    ``indices`` holds the violating step indices.
    """

    def __init__(self, message, indices=()):
        super().__init__(message)
        self.indices = tuple(int(i) for i in indices)


class SolverError(GridflexError):
    """Optimizer failed to reach the requested tolerance.

    Carries the best iterate found so callers can report partial results.
    """

    def __init__(self, message, best=None, iters=0, residual=float("nan")):
        super().__init__(message)
        self.best = best
        self.iters = int(iters)
        self.residual = float(residual)


class ConfigError(GridflexError):
    """Scenario configuration failed to parse or validate.

    ``location`` is a human-readable pointer (file, line or key path).
    """

    def __init__(self, message, location=None):
        if location:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location


class IdentifiabilityError(GridflexError):
    """Probe signal carries no information for the requested fit."""
