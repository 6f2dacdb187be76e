"""Exception types shared across the package.

CLI exit-code mapping: ValidationError (and subclasses) exit with 1,
every other DehazeError or unexpected exception exits with 2.
"""


class DehazeError(Exception):
    """Base class for all package errors."""


class ValidationError(DehazeError):
    """Bad input data, shapes, labels, or configuration."""


class NumericError(DehazeError):
    """Non-finite values reached a computation that requires finite inputs."""


class CheckpointError(DehazeError):
    """Unreadable, corrupt, or version-mismatched checkpoint archive."""


class WeightsUnavailableError(DehazeError):
    """A pretrained weights snapshot could not be loaded.

    Raised instead of silently falling back to random initialization.
    """
