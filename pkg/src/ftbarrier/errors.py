"""Exception types shared across the toolkit."""


class FtBarrierError(Exception):
    """Base class for all toolkit errors."""


class IntegrationDivergedError(FtBarrierError):
    """Euler step produced a non-finite state."""

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


class DegenerateObservationError(FtBarrierError):
    """A sensor-exclusion request would leave no output rows."""


class IllConditionedNoiseError(FtBarrierError):
    """Restricted output-noise covariance is singular."""


class FilterDivergedError(FtBarrierError):
    """A Kalman filter produced a non-finite estimate or covariance."""

    def __init__(self, message, filter_id=None, step=None):
        super().__init__(message)
        self.filter_id = filter_id
        self.step = step


class EmptyBoxError(FtBarrierError):
    """State box has zero or negative width along some axis."""


class ConfigError(FtBarrierError):
    """Invalid or inconsistent configuration value."""
