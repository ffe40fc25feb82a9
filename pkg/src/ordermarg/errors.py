"""Exception hierarchy shared by all modules."""


class OrderMargError(Exception):
    """Base class for every error raised by this package."""


class ContractError(OrderMargError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor or grid extents do not line up."""


class ConfigError(ContractError):
    """A configuration value is missing, malformed or out of range."""


class TokenIndexError(OrderMargError, IndexError):
    """A token id, class id or target index is outside its vocabulary."""


class NonFiniteError(OrderMargError, FloatingPointError):
    """A NaN or Inf appeared in a tensor."""


class ChecksumError(OrderMargError):
    """Stored data does not match its recorded checksum."""
