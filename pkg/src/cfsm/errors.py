"""Exception hierarchy shared by all cfsm modules."""


class CFSMError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(CFSMError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CFSMError, ValueError):
    """A documented precondition of an operation does not hold."""


class ConfigError(CFSMError, ValueError):
    """An experiment, scenario or variant configuration is invalid."""


class DataError(CFSMError, ValueError):
    """Input data is inconsistent (label ranges, counts, missing ids)."""


class FormatError(CFSMError, ValueError):
    """A file does not follow the expected on-disk format."""


class NumericError(CFSMError, ArithmeticError):
    """A non-finite value appeared during training."""
