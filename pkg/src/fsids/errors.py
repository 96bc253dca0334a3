"""Exception types shared across the package."""


class FsidsError(Exception):
    """Base class for all package errors."""


class ContractError(FsidsError, ValueError):
    """An operation was called with arguments that violate its contract."""


class DataError(FsidsError):
    """Dataset ingestion failed (unreadable root, missing column, ...)."""


class CheckpointError(FsidsError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic string."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint ends before the declared payload is complete."""
