"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataFormatError -> 3,
NumericalError -> 4; anything else is a usage error (1).
"""


class PijepaError(Exception):
    """Base class for package-level failures."""


class ConfigError(PijepaError):
    """Invalid or unknown configuration keys/values."""


class DataFormatError(PijepaError):
    """A serialized artifact (dataset, checkpoint) is unreadable."""


class BadMagicError(DataFormatError):
    pass


class VersionMismatchError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CrcMismatchError(DataFormatError):
    pass


class CheckpointShapeError(DataFormatError):
    """A stored tensor does not match the shape the config implies."""


class NumericalError(PijepaError):
    """NaN, stability violation, or non-convergence in a numerical path."""


class CflError(NumericalError):
    """Explicit timestep exceeds the admissible stability bound."""


class NonConvergenceError(NumericalError):
    """Iterative linear solve hit the iteration cap."""
