"""Exception types raised across jamfed."""


class JamfedError(Exception):
    """Base class for all jamfed errors."""


class InvalidParamsError(JamfedError, ValueError):
    """Parameters violate a documented precondition."""


class FrequencyAliasingError(InvalidParamsError):
    """A requested frequency sits at or above the Nyquist limit of the grid."""


class InsufficientInputError(InvalidParamsError):
    """Input series is too short for the requested transform."""


class ShapeError(JamfedError, ValueError):
    """Tensor shapes are incompatible."""


class PoisonedUpdateError(JamfedError, FloatingPointError):
    """A non-finite value appeared in a gradient or loss during training."""


class AggregationError(JamfedError, ValueError):
    """Client parameter sets cannot be aggregated."""


class PartitionError(JamfedError, ValueError):
    """A dataset partition request cannot be satisfied."""


class ConfigError(JamfedError, ValueError):
    """Experiment configuration failed validation.

    ``path`` names the offending field, e.g. ``training.rounds``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class FormatError(JamfedError, ValueError):
    """A file on disk does not match its expected binary or text layout."""
