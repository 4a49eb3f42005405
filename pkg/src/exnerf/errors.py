"""Exception types shared across the package.

The CLI maps these onto process exit codes (2 invalid input, 3 numeric
divergence, 4 I/O).
"""


class InvalidArgumentError(ValueError):
    pass


class StateError(RuntimeError):
    """An object was used in a state that does not allow the operation."""


class TrainingDivergenceError(FloatingPointError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class UnsupportedFormatError(ValueError):
    """File does not carry the expected magic bytes / version or is truncated."""
