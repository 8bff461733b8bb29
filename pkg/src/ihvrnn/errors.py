"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, ParseError and
DataError -> 3, NumericError -> 4.
"""


class IhvrnnError(Exception):
    """Base class for all package errors."""


class ConfigError(IhvrnnError):
    """Invalid configuration value; message names the offending field path."""


class ParseError(IhvrnnError):
    """Malformed input file; message names the line number where known."""


class DataError(IhvrnnError):
    """Structurally valid input that violates a data contract."""


class ShapeError(IhvrnnError):
    """Array dimensions incompatible with an operation."""


class NumericError(IhvrnnError):
    """Non-finite value produced; message names the computation stage."""


class ContractError(IhvrnnError):
    """An operation was called outside its stated precondition."""
