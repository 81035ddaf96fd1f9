class InvalidInput(ValueError):
    """Raised when an operation receives malformed or out-of-range data."""


class InvalidConfig(ValueError):
    """Raised when a model or run configuration is inconsistent."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
