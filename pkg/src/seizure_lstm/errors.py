"""Exception hierarchy.

The CLI maps ``ConfigError`` to exit status 2, ``DataError`` to 3 and
``DivergenceError`` to 4.
"""


class SeizureLSTMError(Exception):
    """Base class for all package errors."""


class ConfigError(SeizureLSTMError, ValueError):
    """Invalid configuration, argument or class-problem definition."""


class ShapeError(SeizureLSTMError, ValueError):
    """Array dimensions are inconsistent."""


class ConsistencyError(SeizureLSTMError, ValueError):
    """A cached trace does not belong to the parameters it is used with."""


class DataError(SeizureLSTMError):
    """Problems with input data files or signal contents."""


class IngestionError(DataError):
    """A dataset directory or file could not be read."""


class ParseError(DataError):
    def __init__(self, path, line_no, text):
        self.path = path
        self.line_no = line_no
        self.text = text
        super().__init__(f"{path}:{line_no}: not a number: {text!r}")


class SignalLengthError(DataError):
    """A signal is shorter than the required number of samples."""


class SegmentationError(DataError, ValueError):
    """The segment length does not divide the signal length."""


class DegenerateInputError(DataError, ValueError):
    """Zero-power signal or noise passed to SNR mixing."""


class DivergenceError(SeizureLSTMError, FloatingPointError):
    def __init__(self, epoch, batch, loss):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
