"""Exception types shared across the package."""


class FlowreconError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FlowreconError):
    """A run configuration is invalid (bad counts, targets, or flags)."""


class DataError(FlowreconError):
    """Input tables are missing, malformed, or mutually inconsistent."""


class FitError(FlowreconError):
    """A link ensemble cannot be calibrated to the requested target."""


class InfeasibleError(FlowreconError):
    """The balance system cannot satisfy a stated constraint."""


class SolverError(FlowreconError):
    """An iterative solver failed to reach its stopping criterion."""
