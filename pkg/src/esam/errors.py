"""Exception types raised across the package."""


class EsamError(Exception):
    """Base class for all package errors."""


class DimensionError(EsamError, ValueError):
    pass


class DomainError(EsamError, ValueError):
    """Input outside an operation's mathematical domain (e.g. log of 0)."""


class DegenerateRowError(DomainError):
    """A row with (near) zero norm was normalized; usually a collapsed embedding."""


class ContractError(EsamError, ValueError):
    pass


class NumericError(EsamError, ArithmeticError):
    pass


class ParseError(EsamError, ValueError):
    pass


class IntegrityError(EsamError, ValueError):
    pass


class DataError(EsamError, ValueError):
    pass


class ConfigError(EsamError, ValueError):
    pass


class VersionError(EsamError, ValueError):
    pass
