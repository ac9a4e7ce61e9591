class UnsamError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(UnsamError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ValidationError(UnsamError, ValueError):
    pass


class ShapeError(UnsamError, ValueError):
    pass


class DomainError(UnsamError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingError(UnsamError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class CheckpointError(UnsamError):
    pass


class IncompatibleCheckpointError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class FormatError(UnsamError):
    pass


class GenerationError(UnsamError, RuntimeError):
    pass
