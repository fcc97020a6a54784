"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or unusable input data."""


class ShapeError(ValueError):
    """Tensor or raster shapes do not satisfy an operation's contract."""


class TrainingError(RuntimeError):
    """A training loop hit a non-recoverable numerical problem."""
