"""Exception types shared across the package."""


class DeskLSTError(Exception):
    """Base class for all package errors."""


class DimensionError(DeskLSTError, ValueError):
    pass


class UsageError(DeskLSTError, ValueError):
    pass


class ConfigError(DeskLSTError, ValueError):
    pass


class NumericError(DeskLSTError, ArithmeticError):
    pass


class AlignmentError(DeskLSTError, ValueError):
    """CTC target cannot be aligned to the available frames."""


class DataError(DeskLSTError, ValueError):
    pass


class ParseError(DataError):
    pass


class VersionError(DeskLSTError, ValueError):
    pass


class IntegrityError(DeskLSTError, ValueError):
    pass
