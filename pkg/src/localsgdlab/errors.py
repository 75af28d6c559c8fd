"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model/run configuration (bad dimensions, bad field values)."""


class DataError(ValueError):
    """Bad training data (token ids out of range, empty batch, ...)."""


class LayoutError(ValueError):
    """Parameter/gradient/optimizer-state layout mismatch."""


class IntegrityError(RuntimeError):
    """Replica state diverged from the expected layout mid-run."""


class EndOfData(Exception):
    """The token stream cannot supply another full global batch."""


class FitError(ValueError):
    """Scaling-law fit cannot be performed on the given points."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss encountered; carries the diagnostic record."""

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic or {}
