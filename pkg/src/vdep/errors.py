"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ConfigError and UsageError
exit 2, NumericError exits 3, FormatError/ParseError and I/O failures
exit 4.
"""


class VdepError(Exception):
    """Base class for all package errors."""


class ShapeError(VdepError):
    """Operand extents do not satisfy an operation's dimension contract."""


class NumericError(VdepError):
    """A NaN or Inf appeared in a forward value; raised at the failure site."""


class IndexRangeError(VdepError, IndexError):
    """A token or row id falls outside the table it indexes."""


class StaleTapeError(VdepError):
    """Backward was requested on a tape that is consumed or absent."""


class DomainError(VdepError):
    """An estimator input is outside its mathematical domain."""


class ConfigError(VdepError):
    """A configuration value or combination is invalid."""


class UsageError(VdepError):
    """An API call violates a documented precondition."""


class FormatError(VdepError):
    """A binary artifact (checkpoint) is malformed."""


class ParseError(VdepError):
    """A text artifact (dataset file, config) failed to parse."""
