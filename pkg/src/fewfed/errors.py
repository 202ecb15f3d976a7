class ConfigurationError(ValueError):
    """Invalid configuration or inconsistent inputs; raised before any training."""


class NumericalError(FloatingPointError):
    """A loss, gradient or update became non-finite."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class RoundFailure(RuntimeError):
    """A federation round aborted; server and client states are left untouched."""
