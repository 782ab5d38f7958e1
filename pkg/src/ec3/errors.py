"""Exception hierarchy shared across the package."""


class EC3Error(Exception):
    """Base class for all package errors."""


class DomainError(EC3Error, ValueError):
    """An argument lies outside the domain of the operation."""


class IngestError(EC3Error, ValueError):
    """Input data files are malformed."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class ConfigError(EC3Error, ValueError):
    """Experiment configuration is invalid."""


class TrainingError(EC3Error, RuntimeError):
    """Adapter training produced a non-finite loss."""

    def __init__(self, message, epoch=None):
        if epoch is not None:
            message = f"epoch {epoch}: {message}"
        super().__init__(message)
        self.epoch = epoch
