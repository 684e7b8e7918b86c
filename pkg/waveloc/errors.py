"""Exception types shared across the package."""


class WavelocError(Exception):
    """Base class for all errors raised by waveloc."""


class ConfigurationError(WavelocError, ValueError):
    """A model, schedule or experiment is configured inconsistently."""


class InputError(WavelocError, ValueError):
    """An argument is outside the accepted domain."""


class EmptyInputError(InputError):
    """A signal is too short to yield a single analysis window."""


class UnmeasurableError(WavelocError):
    """An acoustic quantity cannot be measured from the given response."""


class CheckpointError(WavelocError):
    """A checkpoint file is malformed or does not match its model."""


class GradientError(WavelocError):
    """A gradient came out non-finite during verification."""


class TrainingError(WavelocError):
    """Training cannot continue (empty split, non-finite loss)."""


class UsageError(WavelocError):
    """The command line could not be parsed."""
