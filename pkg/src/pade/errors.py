class PadeError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PadeError, ValueError):
    """Invalid or inconsistent configuration."""


class AugmentError(PadeError, ValueError):
    """Image or config the augmentation pipelines cannot handle."""


class DataError(PadeError, ValueError):
    """Dataset layout or content problem."""


class TrainingDiverged(PadeError, RuntimeError):
    """Non-finite loss encountered during optimization."""
