"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation requires."""


class DomainError(ValueError):
    """An argument lies outside its admissible range."""


class ConfigurationError(ValueError):
    """A configuration is inconsistent or references missing artifacts."""


class TrainingError(RuntimeError):
    """Model training diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class QualityError(RuntimeError):
    """A trained model did not reach its required accuracy."""


class OptimizationError(RuntimeError):
    """Perturbation optimization produced non-finite values."""

    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class UsageError(TypeError):
    """An operation was invoked on the wrong kind of model."""


class RecordNotFound(KeyError):
    """No perturbation record is stored under the requested key."""
