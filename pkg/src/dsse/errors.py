"""Exception types shared across the package."""


class DsseError(Exception):
    """Base class for all errors raised by this package."""


class NetworkDataError(DsseError):
    """Malformed or inconsistent network input data."""


class SingularNetworkError(DsseError):
    """The non-source admittance block is singular or unusably ill-conditioned."""


class RankDeficiencyError(DsseError):
    """A constraint matrix has a larger kernel than its row count implies."""


class SensorError(DsseError):
    """A sensor definition does not match the network."""


class SingularGradientError(DsseError):
    """A magnitude-sensor gradient is undefined because the reading is near zero."""


class UnobservableError(DsseError):
    """The measurement set does not determine the state."""


class NotConvergedError(DsseError):
    """An iterative solver exhausted its iteration budget."""


class ConfigError(DsseError):
    """Invalid scenario, plan, or CLI configuration."""
