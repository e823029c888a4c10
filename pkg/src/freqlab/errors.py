"""Exception types shared across freqlab."""


class FreqlabError(Exception):
    """Base class for all library errors."""


class InvalidInput(FreqlabError, ValueError):
    pass


class ShapeError(FreqlabError, ValueError):
    pass


class InsufficientData(FreqlabError, ValueError):
    pass


class OracleSizeExceeded(FreqlabError, ValueError):
    pass


class DegenerateLabels(FreqlabError, ValueError):
    pass


class IoError(FreqlabError, OSError):
    pass


class ConfigError(FreqlabError):
    pass
