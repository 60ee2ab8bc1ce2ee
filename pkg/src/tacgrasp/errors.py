"""Exception types shared across the package.

Every error raised by library code derives from GraspError so callers can
catch one base type at CLI boundaries.
"""


class GraspError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(GraspError):
    """An input object or parameter failed validation. Names the field."""


class ContractError(GraspError):
    """An operation was called with mismatched or stale companion data."""


class DimensionError(GraspError):
    """Matrix or vector shapes are incompatible for the requested op."""


class SequencingError(GraspError):
    """Frames were supplied out of tick order or with gaps."""


class EpisodeOverError(GraspError):
    """The simulated object was already dropped; the episode is over."""


class GenerationError(GraspError):
    """A scripted scenario cannot be realized for the given object."""


class DataError(GraspError):
    """A dataset is too small, empty, or otherwise unusable."""


class ParseError(GraspError):
    """A dataset file violates the on-disk format. Carries a line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(GraspError):
    """Training produced a non-finite loss or gradient."""


class NumericalError(GraspError):
    """A numerical routine failed (singular covariance, bad Cholesky)."""


class ModelError(GraspError):
    """A model is untrained, corrupt, or from an unsupported format."""
