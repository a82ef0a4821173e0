"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: config problems exit 2, data
problems exit 3, numerical failures exit 4 (see :mod:`fuseseg.cli`).
"""


class FusesegError(Exception):
    """Base class for all package errors."""


class ConfigError(FusesegError):
    """Invalid or inconsistent configuration (unknown keys, bad ranges...)."""


class DataError(FusesegError):
    """Base class for problems with input data or stored artifacts."""


class DecodeError(DataError):
    """An image file could not be decoded."""


class ShapeMismatch(DataError):
    """Array shapes violate a documented contract."""


class UnknownColor(DataError):
    """A label image contains a color missing from the palette."""


class IoError(DataError):
    """A required file or directory is missing or unreadable."""


class EmptyTarget(DataError):
    """A segmentation target contains no supervised pixels."""


class EmptyMatrix(DataError):
    """A confusion matrix contains no counted pixels."""


class CheckpointError(DataError):
    """Base class for checkpoint archive problems."""


class VersionMismatch(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CorruptBlob(CheckpointError):
    """Checkpoint tensor blob does not match its manifest."""


class NumericalError(FusesegError):
    """A numeric invariant broke (non-finite loss, degenerate ratio...)."""
