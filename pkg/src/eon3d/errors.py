"""Exception types shared across the package."""


class EonError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(EonError, ValueError):
    pass


class ShapeError(EonError, ValueError):
    pass


class GenerationFailure(EonError, RuntimeError):
    pass


class LabelConsistencyError(EonError, ValueError):
    pass


class SceneFormatError(EonError, ValueError):
    """Malformed scene, manifest or checkpoint file."""


class GroupMismatchError(EonError, ValueError):
    pass


class ConfigurationError(EonError, ValueError):
    pass


class NonFiniteLossError(EonError, FloatingPointError):
    def __init__(self, name, message=None):
        self.name = name
        super().__init__(message or f"non-finite value in {name!r}")
