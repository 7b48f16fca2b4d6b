"""Exception taxonomy shared across the package."""


class ShapeError(ValueError):
    """An array has the wrong rank or incompatible dimensions."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent model wiring."""


class DataError(RuntimeError):
    """Manifest or blob content violates the dataset format."""


class EmptyPoolError(RuntimeError):
    """A pooling/aggregation step received zero unmasked inputs."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class NumericalError(RuntimeError):
    """Non-finite values where finite ones are required (divergence, NaN grads)."""
