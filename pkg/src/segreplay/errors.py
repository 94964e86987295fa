"""Exception types shared across the package."""


class ConfigurationError(Exception):
    """Invalid configuration: bad key, bad value, or inconsistent settings."""


class StateError(Exception):
    """Schedule state does not permit the requested operation."""


class AccessGuardError(Exception):
    """Train/val data of a non-current task was touched during a round."""


class CheckpointError(Exception):
    """Checkpoint could not be read or written."""


class ChecksumError(CheckpointError):
    """A checkpoint blob failed its integrity check."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version differs from the supported one."""
