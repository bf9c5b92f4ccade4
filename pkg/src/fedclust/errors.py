"""Exception types shared across the package."""


class FedClustError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FedClustError, ValueError):
    """Invalid configuration value, option combination, or index."""


class ShapeError(FedClustError, ValueError):
    """Array dimensions do not match what an operation requires."""


class DataError(FedClustError, ValueError):
    """Dataset or shard contents violate an operation's preconditions."""


class StateError(FedClustError, RuntimeError):
    """Operation called against a server/protocol state that forbids it."""


class AggregationError(FedClustError, ValueError):
    """Model aggregation received an empty or inconsistent update set."""
