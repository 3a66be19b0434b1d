"""Exception taxonomy shared by all modules.

The CLI maps these onto process exit codes: config/usage problems exit 2,
data problems exit 3, numeric failures exit 4.
"""


class MetainrError(Exception):
    """Base class for all package errors."""


class DimensionError(MetainrError):
    """Tensor or grid shapes are incompatible with the requested operation."""


class ContractError(MetainrError):
    """A documented precondition was violated by the caller."""


class DataError(MetainrError):
    """Input data is structurally invalid (duplicates, bad ordering, ...)."""


class ParseError(DataError):
    """A file could not be parsed; message carries the offending line."""


class NumericError(MetainrError):
    """A computation produced non-finite values or failed a numeric check."""


class FormatError(MetainrError):
    """A binary container (checkpoint) is corrupt, truncated, or mismatched."""


class ConfigError(MetainrError):
    """A configuration document has missing, unknown, or ill-typed fields."""
