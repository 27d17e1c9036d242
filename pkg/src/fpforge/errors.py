"""Exception types shared across the package."""


class FpforgeError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FpforgeError, ValueError):
    pass


class ConflictError(FpforgeError):
    """A registry entry with the same model id already exists."""


class CollisionError(FpforgeError):
    """A fingerprint is too close to one already registered."""


class CorruptCheckpoint(FpforgeError):
    """Stored content hash does not match the file contents."""


class IntegrityError(FpforgeError):
    """A dataset file is missing or its hash does not match the manifest."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class TrainingDiverged(FpforgeError):
    """Raised when a loss becomes non-finite; carries the last good checkpoint path."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class OutputExists(FpforgeError):
    """Refusing to write into a non-empty output location without overwrite."""
