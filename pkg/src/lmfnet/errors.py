"""Exception hierarchy shared by every module."""


class LMFError(Exception):
    """Base class for all errors raised by lmfnet."""


class ShapeError(LMFError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(LMFError, ValueError):
    """A layer, network, or recipe configuration is invalid."""


class NumericalError(LMFError, ArithmeticError):
    """A loss or gradient became non-finite."""


class ParseError(LMFError, ValueError):
    """Base class for malformed file contents."""


class BadMagicError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class HeaderError(ParseError):
    """Header fields are present but invalid (maxval 0, overflowing dims, ...)."""


class MaxvalError(HeaderError):
    """Image header declares a maxval outside 1..65535."""


class RecordLengthError(ParseError):
    pass


class LabelRangeError(ParseError):
    pass


class VersionError(ParseError):
    pass


class CheckpointMismatchError(LMFError, ValueError):
    """A checkpoint tensor does not fit the network it is loaded into."""


class DatasetError(LMFError, ValueError):
    """Dataset directories cannot be paired or contain invalid files."""
