"""Exception types shared across the package."""


class MlvampError(Exception):
    """Base class for all library errors."""


class ConfigError(MlvampError):
    """Invalid configuration or arguments."""


class QuadratureError(MlvampError):
    """Numerical integration did not reach the requested accuracy.

    Carries the best estimate and the estimated truncation error so the
    caller can inspect what went wrong instead of silently using a bad value.
    """

    def __init__(self, message, estimate=None, error_estimate=None, context=None):
        super().__init__(message)
        self.estimate = estimate
        self.error_estimate = error_estimate
        self.context = context or {}


class MonteCarloError(MlvampError):
    """Importance-sampling oracle produced an unreliable estimate."""

    def __init__(self, message, ess=None):
        super().__init__(message)
        self.ess = ess


class DivergenceError(MlvampError):
    """An iterative optimizer or sampler diverged."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class EngineError(MlvampError):
    """A denoiser failed inside the message-passing sweep.

    ``state_dump`` holds iteration/layer context plus the message state at
    the time of failure.
    """

    def __init__(self, message, state_dump=None):
        super().__init__(message)
        self.state_dump = state_dump or {}
