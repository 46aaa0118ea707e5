"""Exception hierarchy shared by every heanet module."""


class HEAError(Exception):
    """Base class for all library errors."""


class DimensionError(HEAError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(HEAError, ValueError):
    """A hyperparameter or option is invalid."""


class DataError(HEAError, ValueError):
    """Input data violates a precondition (labels, lengths, empty splits)."""


class FormatError(HEAError, ValueError):
    """A file could not be parsed or does not match its declared layout."""


class GatherIndexError(HEAError, IndexError):
    """An index used for gathering is out of range."""


class SizeError(HEAError, ValueError):
    """A request exceeds a configured size cap."""


class ArgumentError(HEAError, ValueError):
    """A call argument is outside its valid range (for example M > N)."""
