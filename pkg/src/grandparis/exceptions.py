"""Error types raised by the smoothing library."""


class GrandParisError(Exception):
    """Base class for library errors."""


class ConfigError(GrandParisError):
    """Invalid or unknown configuration input."""


class WeightDegeneracyError(GrandParisError):
    """All particle weights vanished at one step."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"all particle weights vanished at step {step}")


class BoundViolationError(GrandParisError):
    """A density estimate exceeded the accept-reject bound sigma_plus."""


class BackwardStallError(GrandParisError):
    """Backward-index rejection sampling exceeded max_trials."""

    def __init__(self, step, site, trials):
        self.step = step
        self.site = site
        self.trials = trials
        super().__init__(
            f"backward sampling stalled at step {step}, site {site}: "
            f"{trials} trials without an acceptance; consider a different "
            f"bound strategy"
        )


class StrategyUnavailableError(GrandParisError):
    """The requested bound strategy has no finite bound for this model."""


class DegenerateKernelError(GrandParisError):
    """Backward kernel normalizer is zero."""


class MetricUndefinedError(GrandParisError):
    """Metrics need at least two replicates and nonzero reference and mean."""
