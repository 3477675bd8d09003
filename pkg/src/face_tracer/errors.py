from typing import Optional

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIGURATION = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class TracerError(Exception):
    """Base class for every error raised by the face tracer pipeline."""
    exit_code = EXIT_UNEXPECTED


class ConfigurationError(TracerError, ValueError):
    """Invalid configuration value, unknown key, or a request the setup cannot satisfy."""
    exit_code = EXIT_CONFIGURATION


class ShapeError(ConfigurationError):
    """Tensor dimensions, pyramid scales or vector lengths do not line up."""


class DegenerateInputError(TracerError, ValueError):
    """A vector is too close to zero for its direction to be defined."""
    exit_code = EXIT_NUMERIC


class DataError(TracerError, OSError):
    """A file on disk is missing, unreadable or corrupt."""
    exit_code = EXIT_DATA

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class NumericFault(TracerError, ArithmeticError):
    """
    A NaN or infinity appeared during the forward pass or in a loss term.

    Attributes:
        stage (Optional[int]): Encoder/decoder stage index where the fault appeared.
        term (Optional[str]): Name of the loss term that was non-finite.
    """
    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, stage: Optional[int] = None, term: Optional[str] = None):
        super().__init__(message)
        self.stage = stage
        self.term = term


def exit_code_for(exc: BaseException) -> int:
    """Maps an exception to the process exit code used by the CLI."""
    if isinstance(exc, TracerError):
        return exc.exit_code
    return EXIT_UNEXPECTED
