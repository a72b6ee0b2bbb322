"""Exception types raised across the package."""


class InvalidArgumentError(ValueError):
    pass


class DegenerateRotationError(ValueError):
    """A 6D rotation whose triples cannot be orthonormalized."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyObservationError(ValueError):
    pass


class LoadError(IOError):
    pass


class ConfigError(ValueError):
    pass


class MissingPrerequisiteError(FileNotFoundError):
    pass


class NumericalError(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
